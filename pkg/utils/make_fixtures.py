from pathlib import Path

import numpy as np

from modules.graph import build_instance_graph, dump_graph

FIXTURES = Path(__file__).resolve().parent.parent / 'tests' / 'fixtures'


def graph_features(n: int = 8, d: int = 4, seed: int = 7) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(n, d))


def orthonormal_features() -> np.ndarray:
    # every off-diagonal cosine is 0, so each row keeps itself and the lowest other index
    return np.eye(4)


def compass_features() -> np.ndarray:
    # east, north-east, north, west: cosines of 0, +-1/sqrt(2) and -1
    return np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 0.0]])


def golden_graphs() -> dict[str, str]:
    '''Plain-text dumps that pin graph generation and the Laplacian spectrum. Both inputs have
    closed-form cosines, so the committed files can be checked by hand.'''
    return {
        'graph_orthonormal': dump_graph(build_instance_graph(orthonormal_features(), k=2)),
        'graph_compass': dump_graph(build_instance_graph(compass_features(), k=2)),
    }


def write_fixtures(fixtures: dict, root: Path = FIXTURES):
    root.mkdir(parents=True, exist_ok=True)
    for k, v in fixtures.items():
        (root / f'{k}.txt').write_text(v)


if __name__ == '__main__':
    write_fixtures(golden_graphs())
