"""Voltage-clamp Markov-model simulation, fitting, and discrepancy ensembles."""

from .errors import (ConfigError, DegenerateModelError, FitFailureError,
                     GridMismatchError, IonfitError, NumericalFailureError,
                     ParameterArityError, ProtocolRangeError,
                     SamplingFailureError, StiffnessError)
from .models import (BEATTIE_DEFAULTS, BEATTIE_MODEL, WANG_DEFAULTS, WANG_MODEL,
                     MarkovModel, NernstInputs, ParameterSet, RateExpr,
                     assemble_matrix, builtin_model, load_model, load_params,
                     nernst_potential, observe_current, save_model, save_params,
                     steady_state)
from .protocols import (Protocol, Segment, builtin_protocols, load_protocol,
                        parse_protocol, protocol_to_text, ramp,
                        resolve_protocol, save_protocol, step)
from .simulate import (NoiseSpec, SolverSettings, Trace, generate_data,
                       load_trace, save_trace, simulate, simulate_states)

__version__ = "0.1.0"
