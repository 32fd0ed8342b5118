import socket

from prometheus_client import REGISTRY, Counter, Histogram, Info, write_to_textfile

# METRICS
NODE_HOST_NAME = socket.gethostname()

MODALSIM_NODE_INFO = Info("modalsim_node", "modalsim node info")
MODALSIM_NODE_INFO.info({"node_name": NODE_HOST_NAME})

TRAJECTORY_COUNT = Counter(
    "trajectory_count",
    "simulated property state trajectories",
    labelnames=[
        "node",
    ],
)
TRAJECTORY_COUNT = TRAJECTORY_COUNT.labels(node=NODE_HOST_NAME)


JUMP_COUNT = Counter(
    "jump_count",
    "jumps between preferred paths",
    labelnames=[
        "node",
    ],
)
JUMP_COUNT = JUMP_COUNT.labels(node=NODE_HOST_NAME)


BRUTE_FORCE_RESTARTS = Counter(
    "brute_force_restarts",
    "restarts spent by the brute-force entropy minimizer",
    labelnames=[
        "node",
    ],
)
BRUTE_FORCE_RESTARTS = BRUTE_FORCE_RESTARTS.labels(node=NODE_HOST_NAME)


UNRESOLVED_COUNT = Counter(
    "unresolved_minimization_count",
    "preferred decompositions left unresolved",
    labelnames=[
        "node",
    ],
)
UNRESOLVED_COUNT = UNRESOLVED_COUNT.labels(node=NODE_HOST_NAME)


DECOMPOSE_TIME = Histogram(
    "decompose_time_seconds",
    "preferred decomposition time seconds",
    labelnames=[
        "node",
    ],
)
DECOMPOSE_TIME = DECOMPOSE_TIME.labels(node=NODE_HOST_NAME)


TIMELINE_BUILD_TIME = Histogram(
    "timeline_build_time_seconds",
    "time to build the shared state/path timeline",
    labelnames=[
        "node",
    ],
)
TIMELINE_BUILD_TIME = TIMELINE_BUILD_TIME.labels(node=NODE_HOST_NAME)


ENSEMBLE_SAMPLE_TIME = Histogram(
    "ensemble_sample_time_seconds",
    "time to sample a trajectory ensemble",
    labelnames=[
        "node",
    ],
)
ENSEMBLE_SAMPLE_TIME = ENSEMBLE_SAMPLE_TIME.labels(node=NODE_HOST_NAME)


def dump_metrics(path):
    write_to_textfile(path, REGISTRY)
