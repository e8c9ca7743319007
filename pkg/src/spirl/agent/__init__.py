from .aggregator import POOLING_MODES, Aggregator, AggregatorConfig, SalientSet, all_pad, policy_attention
from .learner import REGIMES, AgentConfig, EvalStats, Learner, evaluate, load_policy, save_agent, train
from .network import PolicyNetwork, QHead, act
from .pipeline import ProcessedFrame, SaliencyPipeline
from .replay import NStepBuffer, PrioritizedReplay, SumTree, Transition, double_q_bootstrap, n_step_target

__all__ = [
    "POOLING_MODES",
    "REGIMES",
    "AgentConfig",
    "Aggregator",
    "AggregatorConfig",
    "EvalStats",
    "Learner",
    "NStepBuffer",
    "PolicyNetwork",
    "PrioritizedReplay",
    "ProcessedFrame",
    "QHead",
    "SaliencyPipeline",
    "SalientSet",
    "SumTree",
    "Transition",
    "act",
    "all_pad",
    "double_q_bootstrap",
    "evaluate",
    "load_policy",
    "n_step_target",
    "policy_attention",
    "save_agent",
    "train",
]
