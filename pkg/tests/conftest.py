import numpy as np
import pytest

from voxseg.network import NetworkSpec, build


def tiny_spec(arch="CNN_multi", width=2, fc=(3, 3, 3), num_classes=3):
    if arch == "CNN_base":
        return NetworkSpec("CNN_base", (width,) * 3, 7, fc, num_classes)
    taps = (3, 6, 9) if arch == "CNN_multi" else ()
    return NetworkSpec(arch, (width,) * 9, 3, fc, num_classes, taps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def multi_net():
    spec = tiny_spec()
    return spec, build(spec, np.random.default_rng(0))


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _signs(cache):
    return {k: np.signbit(v) for k, v in cache.preacts.items()}


def network_fd_errors(state, spec, x, y, rng, eps=1e-4, per_tensor=2, max_tries=200, skip_kinks=True):
    """Relative errors of analytic vs central-difference gradients of the CE loss.

    Coordinates whose perturbation flips the sign of any PReLU pre-activation
    straddle a kink where the loss is not differentiable; they are redrawn.
    With all slopes at 1 the network has no kinks and ``skip_kinks=False``
    probes every coordinate drawn.
    """
    from voxseg.network import backward, forward
    from voxseg.training import cross_entropy_loss

    scores, cache = forward(state, spec, x)
    grads = backward(state, spec, cache, cross_entropy_loss(scores, y)[1])
    errors = {}
    for key, arr in state.params.items():
        found = []
        for _ in range(max_tries):
            if len(found) == per_tensor:
                break
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + eps
            sp, cp = forward(state, spec, x)
            arr[idx] = old - eps
            sm, cm = forward(state, spec, x)
            arr[idx] = old
            a, b = _signs(cp), _signs(cm)
            if skip_kinks and any(np.any(a[k] != b[k]) for k in a):
                continue
            numeric = (cross_entropy_loss(sp, y)[0] - cross_entropy_loss(sm, y)[0]) / (2 * eps)
            found.append(float(relative_error(grads[key][idx], numeric)))
        errors[key] = found
    return errors


def perturbed_net(spec, seed, unit_slopes=False):
    """Network with nonzero biases (and random or unit slopes) so every path carries gradient."""
    from voxseg.network import build

    r = np.random.default_rng(seed)
    state = build(spec, r)
    for k, v in state.params.items():
        if k.endswith(".bias"):
            state.params[k] = r.normal(scale=0.1, size=v.shape)
        elif k.endswith(".slope"):
            state.params[k] = np.ones_like(v) if unit_slopes else r.uniform(0.05, 0.5, size=v.shape)
        elif unit_slopes and k.endswith(".weight"):
            # identity activations keep variance at gain 1; He scaling would saturate the softmax
            state.params[k] = v / np.sqrt(2.0)
    x = r.normal(size=(1, 19, 19, 19))
    y = r.integers(spec.num_classes, size=(1, 1, 1))
    return state, x, y, r


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_RESULTS[number] = (bool(passed), title, detail)
    print(f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:>2}. {title}: {detail}")
