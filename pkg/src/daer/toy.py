"""The 2-token x 3-point planted-alignment problem used to check the search.

With T*N = 6 and 10% masks every action touches one cell, so the action space
is 12 actions and a budget of 100 covers it more than 5 times over.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .align import AlignModel, AttentionState, ProjectionSet, base_logits
from .mcts import (ActionSampler, ActionSpec, MctsConfig, RewardConfig, RewardContext, SearchResult,
                   apply_action, compute_reward, mcts_optimize_result)
from .synthetic import SyntheticPairSpec, generate_synthetic_batch


@dataclass
class ToyConfig:
    dim: int = 8
    concept_count: int = 8
    noise_sigma: float = 0.3
    probe: int = 32
    alpha: float = 0.5
    budget: int = 100
    rollout_depth: int = 5
    delta: float = 0.1
    mask_fraction: float = 0.1
    actions_per_expansion: int = 12


@dataclass
class ToyOutcome:
    seed: int
    result: SearchResult
    root_reward: float
    optimized_reward: float
    oracle_action: ActionSpec
    oracle_rewards: List[float]

    @property
    def improved(self) -> bool:
        return self.optimized_reward >= self.root_reward

    @property
    def matches_oracle(self) -> bool:
        return self.result.action == self.oracle_action


def toy_problem(seed: int, cfg: ToyConfig = ToyConfig()):
    """(root state, reward context) for one seeded instance. Projections are
    identities so the logits are raw token/point feature similarities."""
    spec = SyntheticPairSpec(t_tokens=2, n_points=3, dim=cfg.dim, concept_count=cfg.concept_count,
                             noise_sigma=cfg.noise_sigma)
    rng = np.random.default_rng(seed)
    batch = generate_synthetic_batch(spec, cfg.probe, rng)
    model = AlignModel.init(cfg.dim, cfg.dim, rng)
    model.proj = ProjectionSet.identity(cfg.dim)
    logits = base_logits(model, batch.f_text, batch.f_3d)
    root = AttentionState.from_logits(logits[0])
    return root, RewardContext(model, batch.f_text, batch.f_3d, root, logits)


def run_toy(seed: int, cfg: ToyConfig = ToyConfig(), mcts: Optional[MctsConfig] = None) -> ToyOutcome:
    root, ctx = toy_problem(seed, cfg)
    mcfg = mcts or MctsConfig(budget=cfg.budget, rollout_depth=cfg.rollout_depth, delta=cfg.delta,
                              mask_fraction=cfg.mask_fraction,
                              actions_per_expansion=cfg.actions_per_expansion, seed=seed)
    rcfg = RewardConfig(alpha=cfg.alpha)
    res = mcts_optimize_result(root, mcfg, rcfg, ctx)
    # depth-1 oracle: score every legal action once, lowest index wins ties
    actions = ActionSampler(root.shape, mcfg).enumerate()
    rewards = [compute_reward(root, apply_action(root, a), rcfg, ctx) for a in actions]
    best = int(np.argmax(rewards))
    return ToyOutcome(seed, res, compute_reward(root, root, rcfg, ctx),
                      compute_reward(root, res.state, rcfg, ctx), actions[best], rewards)
