import numpy as np
import pytest

from neurodistill import model as M
from neurodistill.io import default_spec, gen_synthetic
from neurodistill.optim import TrainHyper, train
from neurodistill.quant import FrontEnd, QATHyper, calibrate_clips, qat_train
from neurodistill.signal import extract_batch, preset_bank

FS = 500.0


@pytest.fixture(scope="session")
def bank():
    return preset_bank("monkey_r", FS)


@pytest.fixture(scope="session")
def synth_task(bank):
    """4-class synthetic train/test split with tokens."""
    train_ds = gen_synthetic(default_spec(n_windows=300, seed=11))
    test_ds = gen_synthetic(default_spec(n_windows=200, seed=12))
    return {
        "train": train_ds, "test": test_ds,
        "train_tokens": extract_batch(train_ds.windows, FS, bank, 10),
        "test_tokens": extract_batch(test_ds.windows, FS, bank, 10),
    }


@pytest.fixture(scope="session")
def fp_model(synth_task):
    tok = synth_task["train_tokens"]
    cfg = M.DecoderConfig(input_dim=tok.shape[2], out_dim=4)
    rep = train(tok, synth_task["train"].labels, cfg, TrainHyper(epochs=30, lr=3e-3),
                np.random.default_rng(0))
    return cfg, rep.params


@pytest.fixture(scope="session")
def frontend(bank, synth_task):
    _, T, C = synth_task["train"].windows.shape
    return FrontEnd.from_bank(bank, T, C)


@pytest.fixture(scope="session")
def qat_model(fp_model, synth_task, frontend):
    cfg, params = fp_model
    tok = synth_task["train_tokens"]
    clips = calibrate_clips(params, cfg, tok)
    hyper = QATHyper(train=TrainHyper(epochs=3, lr=1e-3))
    return qat_train(params, cfg, tok, synth_task["train"].labels, clips, frontend, hyper,
                     np.random.default_rng(1))


ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
