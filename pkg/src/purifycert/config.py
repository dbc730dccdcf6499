import torch

validate_args: bool = True
dtype: torch.dtype = torch.float64
# Reverse trajectories leaving this box raise NonFiniteStateError.
divergence_bound: float = 50.0
# Monte-Carlo work is cut into chunks of this many rows, each with its own stream.
chunk_size: int = 1024
