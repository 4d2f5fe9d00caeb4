import numpy as np
import pytest

from kernel_counter.imgcore import save_image

THRESHOLDS = [[0.25, 0.25, 0.25], [0.5, 0.5, 0.5], [0.375, 0.5, 0.625]]


def blob_image(n_cells, n_faint, seed, size=48):
    """Light background with dark square cells and fainter square artifacts."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size, 3), 200 / 255)
    slots = rng.permutation([(r, c) for r in range(0, size - 5, 8) for c in range(0, size - 5, 8)])
    for i, (r, c) in enumerate(slots[: n_cells + n_faint]):
        img[r:r + 5, c:c + 5] = 40 / 255 if i < n_cells else 110 / 255
    return img


def write_manifest(root, entries, thresholds=THRESHOLDS, extra=""):
    lines = ["kc-manifest 1", "connectivity 8"]
    lines += ["threshold " + " ".join(repr(x) for x in t) for t in thresholds]
    lines += [extra] if extra else []
    lines += [f"entry {name} {label}" for name, label in entries]
    path = root / "data.kcm"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def corpus(tmp_path):
    """Six images whose cell counts are the labels; returns the manifest path."""
    entries = []
    for i, (cells, faint) in enumerate([(3, 1), (5, 2), (8, 0), (2, 4), (10, 3), (6, 6)]):
        name = f"img{i}.png"
        save_image(tmp_path / name, blob_image(cells, faint, i))
        entries.append((name, f"count:{cells}"))
    return write_manifest(tmp_path, entries)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance_report(request):
    """Record one summary line per acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(criterion, passed, detail):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        lines[criterion] = f"criterion {criterion}: {status}  {detail}"
        print(lines[criterion])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
