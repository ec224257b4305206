from .config import RunConfig, load_config, parse_config
from .replay import export_trace, replay_policy
from .trace import AttnTrace, read_trace, validate_trace, write_trace
