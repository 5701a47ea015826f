import pytest
import torch

from ssmvla.data import EpisodeStore, gen_data, load_episodes
from ssmvla.frontend import load_backend

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def backend():
    return load_backend(None)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d24"
    gen_data(path, 24, seed=0)
    return path


@pytest.fixture(scope="session")
def small_store(small_data, backend):
    return EpisodeStore(load_episodes(small_data), backend)


TINY_RUN = {
    "data": {"episodes": 24},
    "lam": {"width": 32, "code_dim": 16, "enc_layers": 1, "dec_layers": 1, "heads": 2, "patch": 16, "vq_warmup_steps": 4},
    "lam_train": {"steps": 10, "batch_size": 4, "log_every": 1, "lr": 1e-3},
    "policy": {"width": 32, "layers": 2, "heads": 2, "context_dim": 16},
    "velocity": {"hidden": 32, "layers": 2, "time_dim": 16},
    "vla_train": {"steps": 10, "batch_size": 4, "log_every": 1, "lr": 1e-3},
    "loss": {"lambda_lpips": 0.0},
    "eval": {"rollouts": 4, "chains": 2, "horizon": 16},
}


@pytest.fixture
def tiny_cfg():
    from ssmvla.config import RunConfig

    return RunConfig.from_dict(TINY_RUN)


@pytest.fixture(scope="session")
def tiny_stores(small_data):
    from ssmvla.config import RunConfig
    from ssmvla.training import prepare_stores

    return prepare_stores(RunConfig.from_dict(TINY_RUN), small_data)


# acceptance criteria report: number -> (passed, detail)
CRITERIA = {}
N_CRITERIA = 10


@pytest.fixture
def record_criterion():
    def record(n, passed, detail=""):
        CRITERIA[n] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in CRITERIA:
            ok, detail = CRITERIA[n]
            tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n:2d}: NOT RUN")
