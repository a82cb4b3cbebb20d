import numpy as np


class DivergedError(FloatingPointError):
    pass


class Adam:
    """ADAM with bias correction; updates parameter arrays in place."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise DivergedError(f"diverged: non-finite gradient for {k}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)).astype(p.dtype)
        return params

    def state(self):
        return {"step_count": self.step_count, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "epsilon": self.epsilon}
