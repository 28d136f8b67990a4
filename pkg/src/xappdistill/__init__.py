"""Multi-xApp control of a simulated cellular network: DQN teachers, conflict
mitigation and policy distillation into a single multi-head xApp."""

__version__ = "0.1.0"
