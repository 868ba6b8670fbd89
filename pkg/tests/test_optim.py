import numpy as np

from cellseg.optim import Adam
from cellseg.tensor import parameter


def reference_adam(theta0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar simulation of bias-corrected Adam."""
    theta, m, v = theta0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(theta)
    return out


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        p = parameter(np.array([1.0], dtype=np.float32))
        opt = Adam([p], lr=3e-4)
        p.grad = np.array([0.1], dtype=np.float32)
        opt.step()
        assert np.isclose(p.data[0], 1.0 - 3e-4, atol=1e-8)

    def test_zero_gradient_keeps_parameters(self):
        p = parameter(np.array([2.5], dtype=np.float32))
        opt = Adam([p])
        p.grad = np.zeros(1, dtype=np.float32)
        opt.step()
        assert p.data[0] == 2.5

    def test_matches_reference_trajectory(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=30)
        p = parameter(np.array([0.7], dtype=np.float64))
        opt = Adam([p], lr=0.01)
        traj = []
        for g in grads:
            p.grad = np.array([g])
            opt.step()
            traj.append(p.data[0])
        want = reference_adam(0.7, grads, lr=0.01)
        assert np.allclose(traj, want, rtol=1e-10)

    def test_quadratic_convergence(self):
        # minimize f(theta) = theta^2 from theta0 = 1; momentum makes the raw
        # trajectory overshoot zero, so the decaying envelope is what shrinks
        p = parameter(np.array([1.0], dtype=np.float64))
        opt = Adam([p], lr=0.1)
        trace = []
        for _ in range(100):
            p.grad = 2.0 * p.data
            opt.step()
            trace.append(abs(p.data[0]))
        envelope = [max(trace[i:i + 20]) for i in range(0, 100, 20)]
        assert all(b < a for a, b in zip(envelope, envelope[1:]))
        assert trace[-1] < 0.1

    def test_nonfinite_gradient_skips_step(self):
        p = parameter(np.array([1.0], dtype=np.float32))
        opt = Adam([p])
        p.grad = np.array([np.nan], dtype=np.float32)
        report = opt.step()
        assert not report.applied and "non-finite" in report.reason
        assert p.data[0] == 1.0 and opt.t == 0

    def test_step_count_increments_per_applied_update(self):
        p = parameter(np.array([1.0], dtype=np.float32))
        opt = Adam([p])
        for i in range(1, 4):
            p.grad = np.array([0.5], dtype=np.float32)
            opt.step()
            assert opt.t == i

    def test_zero_grad_clears(self):
        p = parameter(np.array([1.0], dtype=np.float32))
        opt = Adam([p])
        p.grad = np.ones(1, dtype=np.float32)
        opt.zero_grad()
        assert p.grad is None
