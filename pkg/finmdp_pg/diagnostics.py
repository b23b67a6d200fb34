from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from finmdp_pg.config import config
from finmdp_pg.gradients import (
    Dynamic,
    Simultaneous,
    objective_dynamic,
    objective_simultaneous,
    pl_certificate_dynamic,
    pl_certificate_simultaneous,
)
from finmdp_pg.logger import logger
from finmdp_pg.mdp import backward_induction_optimal, evaluate_policy, forward_measure
from finmdp_pg.softmax import ParamTensor


def finite_difference(func, x0, eps=1e-6):
    """
    Centered-difference gradient of a scalar function of a flat parameter vector.

    Args:
        func (callable): Maps a 1-d array to a float.
        x0 (np.ndarray): Point at which the gradient is taken.
        eps (float, optional): Step size.

    Returns:
        np.ndarray: Gradient estimate, same shape as x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    logger.debug(f"Finite difference gradient over {len(x0)} coordinates, eps={eps}")
    grad = np.zeros(len(x0))
    for j in range(len(x0)):
        x = np.copy(x0)
        x[j] = x0[j] + eps
        fplus = func(x)
        x[j] = x0[j] - eps
        fminus = func(x)
        grad[j] = (fplus - fminus) / (2 * eps)
    return grad


def finite_difference_gradient(mdp, theta, scheme, eps=1e-6):
    """
    Finite-difference check of the exact gradients.

    Returns:
        ParamTensor | np.ndarray: The full tensor for a Simultaneous scheme, the
            epoch block for a Dynamic scheme.
    """
    if isinstance(scheme, Simultaneous):
        flat = finite_difference(lambda x: objective_simultaneous(mdp, theta.from_flat(x), scheme.mu), theta.flat(), eps)
        return theta.from_flat(flat)

    h = scheme.h
    block = theta.blocks[h] if isinstance(theta, ParamTensor) else np.asarray(theta, dtype=np.float64)
    mask = mdp.mask[h]

    def _objective(x):
        candidate = np.zeros(mask.shape)
        candidate[mask] = x
        return objective_dynamic(mdp, candidate, scheme.tilde_pi, scheme.mu_h, h)

    result = np.zeros(mask.shape)
    result[mask] = finite_difference(_objective, block[mask], eps)
    return result


def check_monotone(values, tol=1e-12):
    """
    Indices i where values[i] < values[i - 1] - tol.

    Exact gradient ascent with the prescribed step sizes never decreases the
    logged objective, so an empty result is expected for exact runs.
    """
    values = np.asarray(values, dtype=np.float64)
    drops = np.nonzero(values[1:] < values[:-1] - tol)[0] + 1
    if len(drops):
        logger.warning(f"Objective decreased at {len(drops)} logged steps, first at row {int(drops[0])}")
    return [int(i) for i in drops]


def certify_checkpoints(mdp, checkpoints, scheme, max_workers=None):
    """
    Evaluate PL certificates for a batch of parameter snapshots in parallel.

    Args:
        checkpoints (list): ParamTensor snapshots (epoch blocks for a Dynamic scheme).
        scheme (Simultaneous | Dynamic): Which objective to certify.

    Returns:
        list: PlCertificate per checkpoint, in input order.
    """
    max_workers = max_workers or config.get_or("compare_max_workers", 4)
    if isinstance(scheme, Simultaneous):
        _, pi_star = backward_induction_optimal(mdp)
        optimal = (evaluate_policy(mdp, pi_star), pi_star, forward_measure(mdp, pi_star, scheme.mu))

        def _certify(theta):
            return pl_certificate_simultaneous(mdp, theta, scheme.mu, optimal=optimal)

    elif isinstance(scheme, Dynamic):

        def _certify(theta):
            return pl_certificate_dynamic(mdp, theta, scheme.tilde_pi, scheme.mu_h, scheme.h)

    else:
        raise TypeError(f"Unknown scheme {scheme!r}")

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        certificates = list(executor.map(_certify, checkpoints))

    failed = [i for i, certificate in enumerate(certificates) if not certificate.holds()]
    logger.info(f"Certified {len(certificates)} checkpoints, {len(failed)} violations")
    return certificates
