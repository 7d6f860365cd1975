"""Network test bed: latency field, FEC framing, event simulator and baselines."""
from .config import ChurnSchedule, SimConfig, load_config, parse_config
from .fec import FecFrame, Shard, fec_decode, fec_encode, frame_delivery_probability
from .link import LinkModel, link_latency

__all__ = [
    "ChurnSchedule",
    "FecFrame",
    "LinkModel",
    "Shard",
    "SimConfig",
    "fec_decode",
    "fec_encode",
    "frame_delivery_probability",
    "link_latency",
    "load_config",
    "parse_config",
]
