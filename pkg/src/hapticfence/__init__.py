"""Forbidden-region virtual fixture guidance for simulated tumor resection.

Contours are swept into a convex hull fixture; a 1 kHz finger-proxy servo
renders repulsive forces against it; tracker simulation, a transform streaming
protocol, resection scoring, and a WebSocket UI bridge round out the loop.
"""

from .engine import ProxyState, VfConfig, compute_force, step_proxy
from .errors import (
    BadMagicOrVersion,
    ChecksumMismatch,
    ConfigError,
    ConnectionLost,
    DegenerateInput,
    DegenerateMotion,
    EmptyStack,
    EmptyTrajectory,
    HapticFenceError,
    InvalidBody,
    NameTooLong,
    OversizeBody,
    StaleInput,
    Truncated,
    TumorOutOfBounds,
    UnknownFrame,
    WireError,
)
from .frames import FrameGraph, FrameId, PivotResult, RigidTransform, pivot_calibrate
from .geometry import (
    Contour,
    ContourStack,
    FixtureMesh,
    closest_surface_point,
    contours_to_points,
    convex_hull,
    inflate,
    mesh_from_bytes,
    mesh_to_bytes,
    project_inside_goal,
    signed_distance,
)
from .scenario import (
    Ellipsoid,
    PhantomBox,
    ResectionReport,
    Scenario,
    ScenarioConfig,
    compute_report,
    generate_scenario,
    run_paired,
    run_resection,
)
from .servo import Mailbox, ServoStats, VirtualClock, WallClock, run_servo
from .tracker import (
    MotionScript,
    NoiseModel,
    TrackerSample,
    TrackerSimulator,
    Trajectory,
    TrajectorySample,
)
from .wire import (
    DEFAULT_PORT,
    WireClient,
    WireMessage,
    WireServer,
    decode,
    encode,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
