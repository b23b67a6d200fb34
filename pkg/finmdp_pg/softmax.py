from __future__ import annotations

import numpy as np

from finmdp_pg.data import Data
from finmdp_pg.logger import logger
from finmdp_pg.mdp import TabularPolicy
from finmdp_pg.schema import checkpoint_validator


class ParamTensor:
    """
    Per-epoch softmax parameters theta_h, stored as arrays of shape
    (|S_h|, n_actions). Entries outside `mask[h]` are padding and stay at 0.
    """

    def __init__(self, blocks, mask):
        self.blocks = [np.asarray(block, dtype=np.float64) for block in blocks]
        self.mask = mask

    @classmethod
    def zeros(cls, mdp):
        return cls([np.zeros(mask.shape) for mask in mdp.mask], mdp.mask)

    @classmethod
    def random(cls, mdp, rng, scale=1.0):
        return cls([np.where(mask, rng.normal(0.0, scale, mask.shape), 0.0) for mask in mdp.mask], mdp.mask)

    @classmethod
    def like(cls, other, blocks):
        return cls(blocks, other.mask)

    @classmethod
    def zeros_like(cls, other):
        return cls([np.zeros_like(block) for block in other.blocks], other.mask)

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, h):
        return self.blocks[h]

    def copy(self):
        return type(self)([block.copy() for block in self.blocks], self.mask)

    def with_block(self, h, block):
        blocks = list(self.blocks)
        blocks[h] = np.asarray(block, dtype=np.float64)
        return type(self)(blocks, self.mask)

    def flat(self):
        return np.concatenate([block[mask] for block, mask in zip(self.blocks, self.mask)])

    def from_flat(self, values):
        blocks = []
        offset = 0
        for mask in self.mask:
            block = np.zeros(mask.shape)
            count = int(mask.sum())
            block[mask] = values[offset : offset + count]
            blocks.append(block)
            offset += count
        return type(self)(blocks, self.mask)

    def norm(self):
        return float(np.sqrt(sum(np.sum(np.where(mask, block, 0.0) ** 2) for block, mask in zip(self.blocks, self.mask))))

    def is_finite(self):
        return all(np.all(np.isfinite(block)) for block in self.blocks)

    def __add__(self, other):
        return ParamTensor([a + b for a, b in zip(self.blocks, other.blocks)], self.mask)

    def __sub__(self, other):
        return ParamTensor([a - b for a, b in zip(self.blocks, other.blocks)], self.mask)

    def scaled(self, factor):
        return type(self)([factor * block for block in self.blocks], self.mask)


class GradTensor(ParamTensor):
    """Gradient of an objective with respect to a ParamTensor, same layout."""


def softmax_rows(block, mask):
    """Row-wise softmax over the valid actions, with row-max subtraction."""
    logits = np.where(mask, block, -np.inf)
    logits = logits - np.max(logits, axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / np.sum(weights, axis=1, keepdims=True)


def policy_of(theta):
    return TabularPolicy([softmax_rows(block, mask) for block, mask in zip(theta.blocks, theta.mask)])


def log_policy_grad(theta, h, s, a):
    """
    Gradient of log pi^theta(a|s) at epoch h: supported on row s of block h with
    entries 1{a = a'} - pi^theta(a'|s).
    """
    grad = GradTensor.zeros_like(theta)
    probs = softmax_rows(theta.blocks[h][s : s + 1], theta.mask[h][s : s + 1])[0]
    row = -probs
    row[a] += 1.0
    grad.blocks[h][s] = np.where(theta.mask[h][s], row, 0.0)
    return grad


def lipschitz_gap(theta1, theta2):
    """
    Returns:
        tuple: (max_{s,a} |pi^theta1(a|s) - pi^theta2(a|s)|, ||theta1 - theta2||_2).
    """
    pi1 = policy_of(theta1)
    pi2 = policy_of(theta2)
    gap = max(float(np.max(np.abs(p1 - p2))) for p1, p2 in zip(pi1.probs, pi2.probs))
    return gap, (theta1 - theta2).norm()


def min_optimal_probability(policy, choices, epochs=None):
    """min over (h, s) of policy_h(choices[h][s] | s), restricted to `epochs` when given."""
    epochs = range(len(policy)) if epochs is None else epochs
    return float(
        min(np.min(policy[h][np.arange(policy[h].shape[0]), choices[h]]) for h in epochs),
    )


def save_checkpoint(theta, mdp, path):
    """Write parameters as {"epochs": [{state: {action: value}}]}."""
    epochs = []
    for h, block in enumerate(theta.blocks):
        epochs.append(
            {
                str(state): {str(action): float(block[s, a]) for a, action in enumerate(mdp.actions[h][s])}
                for s, state in enumerate(mdp.states[h])
            },
        )
    Data.dict_to_json({"epochs": epochs}, path)


def load_checkpoint(mdp, path):
    """
    Read a checkpoint written by `save_checkpoint` (or by hand).

    Raises:
        ValueError: If an (h, s, a) entry is missing, duplicated by an unknown key, or not finite.
    """
    document = Data.json_to_dict(path)
    checkpoint_validator.validate(document, source=str(path))
    if len(document["epochs"]) != mdp.horizon:
        raise ValueError(f"Checkpoint has {len(document['epochs'])} epochs, model has {mdp.horizon}")

    theta = ParamTensor.zeros(mdp)
    for h, epoch in enumerate(document["epochs"]):
        for state, row in epoch.items():
            s = mdp.state_index(h, state)
            if set(row) != {str(a) for a in mdp.actions[h][s]}:
                raise ValueError(f"Checkpoint entries for state {state!r} at epoch {h} do not match its actions")
            for action, value in row.items():
                theta.blocks[h][s, mdp.action_index(h, s, action)] = value
        if set(epoch) != {str(s) for s in mdp.states[h]}:
            raise ValueError(f"Checkpoint epoch {h} does not cover every state")
    if not theta.is_finite():
        raise ValueError("Checkpoint contains non-finite parameters")
    logger.info(f"Checkpoint loaded from {path}")
    return theta
