import numpy as np
import pytest

from dmbnmt.model import ModelConfig


def micro_config(variant="dmb", **kw) -> ModelConfig:
    """The smallest full model: d=8, H=2, one encoder and one decoder layer, V=11."""
    values = dict(variant=variant, d=8, d_f=16, heads=2, enc_layers=1, dec_layers=1,
                  n_branches=2, vocab_size=11, max_len=32)
    values.update(kw)
    return ModelConfig(**values)


def random_batch(rng, vocab, batch=3, s_range=(2, 6), t_range=(2, 6)):
    from dmbnmt.corpus import collate
    pairs = []
    for _ in range(batch):
        s = rng.integers(4, vocab, size=rng.integers(*s_range)).tolist()
        t = rng.integers(4, vocab, size=rng.integers(*t_range)).tolist()
        pairs.append((s, t))
    return collate(pairs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one PASS/FAIL line and returns ``ok``.

    The lines are printed together in the terminal summary.
    """

    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_RESULTS].append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
