from __future__ import annotations

import os

import numpy as np

from finmdp_pg.logger import logger
from finmdp_pg.mdp import FiniteMdp, load_model, validate

ABSORBING = "Δ"
CONTINUE, STOP = 0, 1
FACES = [1, 2, 3, 4, 5, 6]


def build_dice(h, start="faces"):
    """
    Optimal stopping of up to `h` dice throws.

    States are the faces 1..6 plus an absorbing state reached after stopping.
    Stopping on a face pays the face value, everything else pays 0.

    Args:
        h (int): Number of epochs (throws).
        start (str, optional): "faces" for a uniform first throw, "uniform" for a
            uniform start over all 7 states.
    """
    if h < 1:
        raise ValueError(f"Dice horizon must be at least 1, got {h}")
    states = FACES + [ABSORBING]
    n = len(states)

    rewards = np.zeros((n, 2))
    rewards[: len(FACES), STOP] = FACES

    kernel = np.zeros((n, 2, n))
    kernel[: len(FACES), CONTINUE, : len(FACES)] = 1.0 / 6.0
    kernel[:, STOP, n - 1] = 1.0
    kernel[n - 1, CONTINUE, n - 1] = 1.0

    if start == "faces":
        mu = np.array([1.0 / 6.0] * len(FACES) + [0.0])
    elif start == "uniform":
        mu = np.full(n, 1.0 / n)
    else:
        raise ValueError(f"Unknown dice start {start!r}")

    return FiniteMdp(
        states=[states] * h,
        actions=[[[CONTINUE, STOP]] * n] * h,
        rewards=[rewards] * h,
        transitions=[kernel] * (h - 1),
        r_star=6.0,
        start=mu,
        name=f"dice:H={h}",
    )


def build_bandit2():
    """One state, one epoch, two arms paying 1 and 0."""
    return FiniteMdp(
        states=[["s"]],
        actions=[[["a1", "a2"]]],
        rewards=[np.array([[1.0, 0.0]])],
        transitions=[],
        r_star=1.0,
        name="bandit2",
    )


def build_zero(h, n_states=2, n_actions=2):
    """All rewards zero; uniform transitions."""
    states = [f"s{i}" for i in range(n_states)]
    actions = list(range(n_actions))
    return FiniteMdp(
        states=[states] * h,
        actions=[[actions] * n_states] * h,
        rewards=[np.zeros((n_states, n_actions))] * h,
        transitions=[np.full((n_states, n_actions, n_states), 1.0 / n_states)] * (h - 1),
        r_star=1.0,
        name=f"zero:H={h}",
    )


def random_mdp(rng, horizon, n_states, n_actions, r_star=1.0, varying_states=False, varying_actions=False):
    """
    Random model with Dirichlet transition rows and uniform rewards in [0, r_star].

    Args:
        rng (np.random.Generator): Source of randomness.
        n_states (int): |S_h|, or the maximum |S_h| with `varying_states`.
        n_actions (int): |A_s|, or the maximum |A_s| with `varying_actions`.
    """
    sizes = [int(rng.integers(1, n_states + 1)) if varying_states else n_states for _ in range(horizon)]
    states = [[f"s{i}" for i in range(size)] for size in sizes]
    actions = [
        [list(range(int(rng.integers(1, n_actions + 1)) if varying_actions else n_actions)) for _ in range(size)]
        for size in sizes
    ]
    width = max(len(a) for epoch in actions for a in epoch)

    rewards = []
    for h, size in enumerate(sizes):
        table = np.zeros((size, width))
        for s in range(size):
            table[s, : len(actions[h][s])] = rng.uniform(0.0, r_star, len(actions[h][s]))
        rewards.append(table)

    transitions = []
    for h in range(horizon - 1):
        kernel = np.zeros((sizes[h], width, sizes[h + 1]))
        for s in range(sizes[h]):
            for a in range(len(actions[h][s])):
                kernel[s, a] = rng.dirichlet(np.ones(sizes[h + 1]))
        transitions.append(kernel)

    start = rng.dirichlet(np.ones(sizes[0]))
    return FiniteMdp(states, actions, rewards, transitions, r_star, start=start, name=f"random:H={horizon}")


def _parameters(text):
    parameters = {}
    for item in filter(None, text.split(",")):
        key, _, value = item.partition("=")
        if not value:
            raise ValueError(f"Malformed generator parameter {item!r}")
        parameters[key.strip()] = int(value)
    return parameters


def resolve_model(source):
    """
    Build or load a model from a generator string or a file path.

    Generators: "dice:H=<h>", "bandit2", "zero:H=<h>", "random:H=<h>,S=<n>,A=<m>,seed=<k>".

    Raises:
        FileNotFoundError: If `source` is neither a generator nor an existing file.
        ValueError: On malformed generator parameters.
    """
    name, _, rest = source.partition(":")
    if name == "bandit2" and not rest:
        mdp = build_bandit2()
    elif name == "dice":
        mdp = build_dice(_parameters(rest).get("H", 5))
    elif name == "zero":
        mdp = build_zero(_parameters(rest).get("H", 3))
    elif name == "random":
        parameters = _parameters(rest)
        mdp = random_mdp(
            np.random.default_rng(parameters.get("seed", 0)),
            parameters.get("H", 3),
            parameters.get("S", 3),
            parameters.get("A", 2),
        )
    elif os.path.isfile(source):
        return load_model(source)
    else:
        raise FileNotFoundError(f"Model {source!r} is neither a builtin generator nor an existing file")

    validate(mdp)
    logger.info(f"Built model {mdp.name}")
    return mdp
