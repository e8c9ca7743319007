from .base import Env, EnvError, StepResult
from .collect import collect_frames
from .remote import ProtocolError, ReferenceServer, RemoteEnv, external_env
from .sprites import ACTION_NAMES, SpritesConfig, SpritesEnv
from .wrapper import AtariStyleWrapper, FrameStack, WrapperConfig

__all__ = [
    "ACTION_NAMES",
    "AtariStyleWrapper",
    "Env",
    "EnvError",
    "FrameStack",
    "ProtocolError",
    "ReferenceServer",
    "RemoteEnv",
    "SpritesConfig",
    "SpritesEnv",
    "StepResult",
    "WrapperConfig",
    "collect_frames",
    "external_env",
]
