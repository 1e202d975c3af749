from pathlib import Path

import numpy as np
import pytest

from neurodistill.distill import TeacherExport
from neurodistill.errors import ConfigError, FormatError, IntegrityError, ParseError
from neurodistill.io import (Checkpoint, ClassSpec, Dataset, SynthSpec, default_spec, dump_bdck, dump_bdds,
                             dump_bdte, gen_synthetic, load_bdck, load_bdds, load_bdte, train_synthetic_teacher)
from neurodistill.signal import SignalWindow, cwt, preset_bank

DATA = Path(__file__).parent / "data"


def random_teacher(seed, n=20, d_t=6, k=3, labels=True):
    rng = np.random.default_rng(seed)
    z, w, b = rng.standard_normal((n, d_t)), rng.standard_normal((d_t, k)), rng.standard_normal(k)
    y = rng.integers(0, k, n) if labels else None
    return TeacherExport(z, w, b, z @ w + b, y)


class TestBdds:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.standard_normal((5, 7, 3)).astype(np.float32).astype(np.float64), 500.0,
                     labels=rng.integers(0, 4, 5))
        blob = dump_bdds(ds, tmp_path / "a.bdds")
        back = load_bdds(tmp_path / "a.bdds")
        np.testing.assert_array_equal(back.windows, ds.windows)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert back.sample_rate_hz == 500.0 and back.task == "classification"
        assert dump_bdds(back) == blob

    def test_regression_and_unlabeled(self):
        ds = Dataset(np.zeros((2, 3, 1)), 250.0, "regression", np.array([0.5, -1.25]))
        back = load_bdds(dump_bdds(ds))
        assert back.task == "regression" and back.labels.tolist() == [0.5, -1.25]
        assert load_bdds(dump_bdds(Dataset(np.zeros((1, 2, 1)), 100.0))).labels is None

    def test_golden(self):
        blob = (DATA / "tiny.bdds").read_bytes()
        ds = load_bdds(blob)
        np.testing.assert_array_equal(ds.windows, np.arange(12).reshape(2, 3, 2) / 4)
        assert ds.labels.tolist() == [1, 0] and ds.sample_rate_hz == 250.0
        assert dump_bdds(ds) == blob

    def test_empty_file(self):
        with pytest.raises(ParseError) as err:
            load_bdds(b"")
        assert err.value.offset == 0

    def test_truncated_and_trailing(self):
        blob = (DATA / "tiny.bdds").read_bytes()
        with pytest.raises(ParseError):
            load_bdds(blob[:-1])
        with pytest.raises(ParseError):
            load_bdds(blob + b"\0")

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            load_bdds(b"XXXX" + bytes(20))


class TestBdte:
    def test_round_trip(self):
        blob = dump_bdte(random_teacher(1))
        back = load_bdte(blob)
        assert back.consistent() and back.labels.dtype == np.int64
        assert dump_bdte(back) == blob

    def test_unlabeled(self):
        assert load_bdte(dump_bdte(random_teacher(2, labels=False))).labels is None

    def test_perturbed_logits(self):
        t = random_teacher(3)
        t.logits[0, 0] += 1e-2
        blob = dump_bdte(t, recompute=False)
        with pytest.raises(IntegrityError):
            load_bdte(blob)
        assert load_bdte(blob, check=False).n == 20

    def test_golden(self):
        t = load_bdte(DATA / "tiny.bdte")
        np.testing.assert_array_equal(t.logits[:, 0], [-1.25, -2.25])
        assert t.labels.tolist() == [0, 1]
        assert dump_bdte(t) == (DATA / "tiny.bdte").read_bytes()


class TestBdck:
    def test_round_trip(self):
        ck = Checkpoint({"kind": "float", "seed": 3}, {"W": np.arange(6.0).reshape(2, 3), "n": np.arange(3)})
        blob = dump_bdck(ck)
        back = load_bdck(blob)
        assert back.config == ck.config and back.quant_meta is None
        np.testing.assert_array_equal(back.tensors["W"], ck.tensors["W"])
        assert back.tensors["n"].dtype == np.int64
        assert dump_bdck(back) == blob

    def test_f64_storage(self):
        w = np.array([1 / 3])
        back = load_bdck(dump_bdck(Checkpoint({}, {"w": w}), float_dtype="<f8"))
        assert back.tensors["w"][0] == 1 / 3

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            dump_bdck(Checkpoint({}, {"c": np.array([1j])}))


class TestSynthetic:
    def test_pure_tone(self):
        spec = SynthSpec(6, 500, 2, 500.0, [ClassSpec((30.0, 30.0), [0, 1], 1.0)], noise_std=0.0, seed=5)
        ds = gen_synthetic(spec)
        bank = preset_bank("monkey_r", 500.0)
        for w in ds.windows:
            power = cwt(SignalWindow(w, 500.0), bank).mean(axis=(1, 2))
            assert bank.center_freqs_hz[int(np.argmax(power))] == 30

    def test_degenerate_priors(self):
        ds = gen_synthetic(default_spec(n_windows=50, class_priors=(1.0, 0.0, 0.0, 0.0)))
        assert not ds.labels.any()

    def test_two_seeds(self):
        a = gen_synthetic(default_spec(n_windows=2000, T=50, seed=1))
        b = gen_synthetic(default_spec(n_windows=2000, T=50, seed=2))
        assert not np.array_equal(a.windows, b.windows)
        # each class count lies within 4 binomial standard deviations of n/4
        sd = np.sqrt(2000 * 0.25 * 0.75)
        for ds in (a, b):
            assert np.all(np.abs(np.bincount(ds.labels, minlength=4) - 500) < 4 * sd)

    def test_seed_reproducible(self):
        a, b = (gen_synthetic(default_spec(n_windows=20, seed=9)) for _ in range(2))
        assert a.windows.tobytes() == b.windows.tobytes() and a.labels.tolist() == b.labels.tolist()

    def test_regression_targets(self):
        ds = gen_synthetic(default_spec(n_windows=30, task="regression"))
        assert ds.task == "regression" and ds.labels.dtype == np.float64 and np.all(ds.labels > 0)

    def test_validation(self):
        with pytest.raises(ConfigError):
            gen_synthetic(default_spec(n_windows=5, class_priors=(0.5, 0.5, 0.5, 0.5)))
        with pytest.raises(ConfigError):
            gen_synthetic(SynthSpec(5, 100, 1, 100.0, [ClassSpec((60.0, 60.0), [0], 1.0)]))

    def test_teacher_fits_and_exports(self):
        spec = default_spec(n_windows=300, seed=4)
        ds = gen_synthetic(spec)
        teacher = train_synthetic_teacher(ds, spec, d_t=32, seed=0)
        exp = teacher.export(ds.windows, ds.labels)
        assert exp.d_t == 32 and exp.consistent()
        assert teacher.train_accuracy >= 0.9
        assert load_bdte(dump_bdte(exp)).consistent()
