"""Graph actor-critic networks, their weights and the learned controller."""
from .controller import RLController
from .layers import edge_rgcn_forward, rgcn_forward
from .networks import NetShape, actor_backward, actor_forward, critic_backward, critic_forward
from .weights import PolicyWeights, WeightsError, load_weights, save_weights

__all__ = [
    "NetShape",
    "PolicyWeights",
    "RLController",
    "WeightsError",
    "actor_backward",
    "actor_forward",
    "critic_backward",
    "critic_forward",
    "edge_rgcn_forward",
    "load_weights",
    "rgcn_forward",
    "save_weights",
]
