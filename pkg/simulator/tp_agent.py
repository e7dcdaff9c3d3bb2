from dataclasses import dataclass, field

import numpy as np

from common.window_messages import DecisionMessage, DecisionReason, LoadBroadcastMessage, RequestPayload


@dataclass
class TpAgent:
    tp: int
    psi: float = 0.0
    logterm: float = 0.0
    users: set[int] = field(default_factory=set, init=False)
    admitted_this_window: bool = field(default=False, init=False)

    def broadcast(self) -> LoadBroadcastMessage:
        return LoadBroadcastMessage(self.tp, self.psi, self.logterm)

    def start_window(self):
        self.admitted_this_window = False

    def attach(self, request: RequestPayload):
        self.psi += request.theta
        self.logterm += request.logterm
        self.users.add(request.user)

    def detach(self, user: int, theta: float, logterm: float):
        self.psi = max(self.psi - theta, 0.0)
        self.logterm -= logterm
        self.users.discard(user)

    def admit_first(self, requests: list[RequestPayload]) -> list[DecisionMessage]:
        """Admit the first requester in arrival order; everyone after it is turned away."""
        decisions = []
        for request in requests:
            if self.admitted_this_window:
                decisions.append(DecisionMessage(self.tp, request.user, False, DecisionReason.ALREADY_ADMITTED))
            else:
                self.admitted_this_window = True
                decisions.append(DecisionMessage(self.tp, request.user, True, DecisionReason.ADMITTED))
        return decisions

    def admit_best(self, requests: list[RequestPayload], maximizes: bool) -> list[DecisionMessage]:
        """Admit the requester offering the best change, ties to the lowest user id."""
        best = self._best_request(requests, maximizes)
        decisions = []
        for request in requests:
            if request is best and not self.admitted_this_window:
                decisions.append(DecisionMessage(self.tp, request.user, True, DecisionReason.ADMITTED))
            else:
                decisions.append(DecisionMessage(self.tp, request.user, False, DecisionReason.NOT_BEST))
        self.admitted_this_window = self.admitted_this_window or best is not None
        return decisions

    def admit_randomized(self, requests: list[RequestPayload], accept_probability: float,
                         rng: np.random.Generator, best_only: bool, maximizes: bool) -> list[DecisionMessage]:
        """Bernoulli acceptance; once a requester is accepted the rest of the window is rejected."""
        best = self._best_request(requests, maximizes) if best_only else None
        decisions = []
        for request in requests:
            if best_only and request is not best:
                decisions.append(DecisionMessage(self.tp, request.user, False, DecisionReason.NOT_BEST))
            elif self.admitted_this_window:
                decisions.append(DecisionMessage(self.tp, request.user, False, DecisionReason.ALREADY_ADMITTED))
            elif rng.random() < accept_probability:
                self.admitted_this_window = True
                decisions.append(DecisionMessage(self.tp, request.user, True, DecisionReason.ADMITTED))
            else:
                decisions.append(DecisionMessage(self.tp, request.user, False, DecisionReason.RANDOMIZED_REJECT))
        return decisions

    @staticmethod
    def _best_request(requests: list[RequestPayload], maximizes: bool) -> RequestPayload | None:
        best = None
        for request in sorted(requests, key=lambda r: r.user):
            if best is None or (request.change > best.change if maximizes else request.change < best.change):
                best = request
        return best
