from common.setfn import LoadVector, SetFunction
from common.window_messages import RequestPayload


class UserAgent:
    """A user's side of the window protocol; it only sees broadcast loads and its own gains."""

    def __init__(self, user: int, set_fn: SetFunction):
        self.user = user
        self.set_fn = set_fn
        self.tp: int | None = None

    def payload(self, tp: int, change: float) -> RequestPayload:
        logterm = float(self.set_fn.logterm[self.user, tp]) if self.set_fn.alpha == 1 else 0.0
        return RequestPayload(self.user, tp, float(self.set_fn.theta[self.user, tp]), logterm, change)

    def join_request(self, loads: LoadVector) -> RequestPayload:
        tp, change = self.set_fn.best_tp(self.user, loads)
        return self.payload(tp, change)

    def migration_request(self, loads: LoadVector, delta: float) -> RequestPayload | None:
        g = self.set_fn.value_from_loads(loads)
        swap = self.set_fn.best_swap(self.user, self.tp, loads)
        if swap is None or not self.set_fn.qualifies(swap[1], g, delta):
            return None
        return self.payload(swap[0], swap[1])
