import numpy as np
import pytest

from smolk.model import (
    ClassificationModel,
    KernelBank,
    KernelGroup,
    SegmentationModel,
)

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion.

    Usage: ``acceptance(7, "pruning", passed, "removed 27.9% at 98.5%")``; the
    line is printed immediately and repeated in the terminal summary.  ``passed``
    of ``None`` marks an optional criterion that could not run.
    """

    def record(number, name, passed, detail=""):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number:>2}: {name} :: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])


def make_seg_model(taps_by_group, biases_by_group, weights, rate=64.0):
    groups = [KernelGroup(name, np.asarray(t, dtype=float), np.asarray(b, dtype=float))
              for name, t, b in zip(("short", "moderate", "long"), taps_by_group, biases_by_group)
              if len(t)]
    return SegmentationModel(KernelBank(groups, rate), np.asarray(weights, dtype=float))


def random_seg_model(rng, counts=(2, 2, 2), lengths=(4, 6, 12), rate=64.0):
    groups = [KernelGroup(name, rng.normal(0, 0.5, (c, k)), rng.normal(0, 0.2, c))
              for name, c, k in zip(("short", "moderate", "long"), counts, lengths) if c]
    bank = KernelBank(groups, rate)
    return SegmentationModel(bank, rng.normal(0, 1.0, bank.n_kernels))


def random_cls_model(rng, counts=(2, 2, 2), lengths=(4, 6, 12), n_classes=3, n_bands=8,
                     f_max=30.0, rate=64.0):
    groups = [KernelGroup(name, rng.normal(0, 0.5, (c, k)), rng.normal(0, 0.2, c))
              for name, c, k in zip(("short", "moderate", "long"), counts, lengths) if c]
    bank = KernelBank(groups, rate)
    m = bank.n_kernels
    return ClassificationModel(bank, rng.normal(0, 1, (m, n_classes)),
                               rng.normal(0, 1, (n_bands, n_classes)),
                               rng.normal(0, 0.5, n_classes), f_max,
                               [f"c{j}" for j in range(n_classes)])
