"""Master-seed splitting shared by every Monte Carlo work item."""

import numpy as np


def item_seed(master, *index):
    """SeedSequence for work item ``index`` under ``master``.

    The derived stream depends only on (master, index), never on the order
    or the process in which items are evaluated.
    """
    return np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(i) for i in index))


def item_rng(master, *index):
    return np.random.default_rng(item_seed(master, *index))


def as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
