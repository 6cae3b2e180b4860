"""Signal/noise moment propagation through randomly initialized deep networks."""

from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateChannelError,
    DegenerateStatisticsError,
    FitError,
    ParameterError,
    RunError,
    ShapeError,
    StatsQueryError,
    UnsupportedArchitectureError,
)
from .fields import BatchedField, ConvParams, RFMatrix, conv_periodic, he_init_conv, receptive_field
from .propagation import (
    Activation,
    ArchitectureSpec,
    BNStats,
    Family,
    Location,
    PairState,
    bn_pair_step,
    bnff_layer,
    conv_pair_step,
    he_param_source,
    phi_pair_step,
    propagate,
    resnet_unit,
    vanilla_layer,
)
from .statistics import (
    ChannelMoments,
    HistogramSpec,
    LayerStats,
    LogIncrementTerms,
    StatsAccumulator,
    abs_first_moment,
    channel_moments,
    chi_step_decomposition,
    coactivation_mixed_fraction,
    effective_rank,
    fit_exponential,
    fit_power_law,
    histogram_log_moment,
    log_increment_terms,
    merge,
    noise_factor,
    normalized_sensitivity,
    residual_cross_term,
)
from .harness import (
    ExperimentConfig,
    InputKind,
    OracleReport,
    RunRecord,
    config_digest,
    config_to_dict,
    finite_difference_validate,
    frozen_prefix_probe,
    generate_input,
    generate_noise,
    jacobian_exact_chi,
    jacobian_mc_chi,
    jacobian_oracle_report,
    load_dataset_binary,
    prepare_input_pair,
    run_experiment,
    run_fc_demo,
)
from .config import config_from_dict, parse_config, serialize_config
from .reporting import emit_results, read_aggregate

__version__ = "0.1.0"
