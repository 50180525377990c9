"""Energy-aware quantized federated learning over finite-blocklength links."""

from .channel import (ChannelParams, RateQuery, achievable_rate, capacity,
                      dispersion, q_function, q_inverse, sample_rayleigh_gain)
from .cma_optimizer import (CmaConfig, CmaResult, EnergyObjective, cma_minimize,
                            objective_value, sweep_bits)
from .convergence import (ConvergenceParams, envelope_constants, envelope_holds,
                          recursion_trajectory, rounds_to_target,
                          rounds_to_target_raw, variance_bound)
from .datasets import (ClientPartition, LabeledDataset, partition, read_idx,
                       synth_blobs, write_idx)
from .energy_time import (DeviceProfile, EnergyBreakdown, ZeroRateError,
                          comp_time, device_round_breakdown,
                          expected_total_energy, local_energy, round_time,
                          uplink_energy)
from .fl_protocol import (FlConfig, RoundRecord, aggregate, parse_rounds_csv,
                          records_to_csv, run_federation, run_summary,
                          select_clients, transmit)
from .quantizer import QuantConfig, QuantizedVector, clip, dequantize, quantize, stochastic_round
from .tinynn import (LocalTrainConfig, Minibatch, ModelParams, backward, evaluate,
                     forward_loss, init_params, local_train)

__version__ = "0.1.0"
