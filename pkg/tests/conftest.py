import numpy as np
import pytest

from spira_xai.corpus import generate_corpus
from spira_xai.model import ConvBlock, ModelConfig

SR = 16000


def sine(freq, seconds=1.0, sr=SR, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return amp * np.sin(2 * np.pi * freq * t + phase)


def harmonic(f0, seconds=1.0, sr=SR, amps=(0.5, 0.25, 0.12)):
    t = np.arange(int(round(seconds * sr))) / sr
    return sum(a * np.sin(2 * np.pi * (k + 1) * f0 * t) for k, a in enumerate(amps))


def snr_db(ref, est):
    ref, est = np.asarray(ref), np.asarray(est)
    return 10 * np.log10(np.sum(ref ** 2) / max(np.sum((ref - est) ** 2), 1e-300))


TINY_BLOCKS = (ConvBlock(4), ConvBlock(4))


def tiny_config(shape=(80, 401), **kw):
    kw.setdefault("conv_blocks", TINY_BLOCKS)
    kw.setdefault("dense_units", 8)
    return ModelConfig(input_shape=shape, **kw)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 + 4 speakers split (4, 2, 2)."""
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_corpus(4, 4, seed=3, out_dir=out, split=(4, 2, 2), noise_seconds=3.0)
    return out, manifest


# --- acceptance summary -------------------------------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        number, title = mark.args
        item.user_properties.append(("criterion", f"{number} {title}"))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    if report.when == "call" or (report.failed and key not in _ACCEPTANCE):
        status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE[key] = (status, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        status, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{status} criterion {key}" + (f" | {detail}" if detail else ""))
