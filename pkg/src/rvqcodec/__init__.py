"""Fixed-length latent compression built on grouped residual vector
quantization, with entropy-coded baselines and rate-distortion tooling.

The package splits along the pipeline: `grids` holds the latent/group
geometry and the synthetic source, `quantizers` the codebook machinery,
`schemes` the three coding schemes (context-standardized RVQ, independent
RVQ, and scalar quantization with range coding), `rans` the range coder,
`bitstream` the fixed-length wire format, and `analysis` the measurement
suite behind the verification battery.
"""

__version__ = "0.1.0"

from .analysis import (
    EntropyReport,
    IndexHistogram,
    RDCurve,
    RDPoint,
    bd_rate,
    conditional_entropy_gap,
    entropy_gap,
    entropy_streams,
    high_rate_predicted_pmf,
    pchip_interpolate,
    rd_sweep,
    total_variation,
)
from .bitstream import (
    BppConfig,
    PackedBitstream,
    StreamHeader,
    compute_bpp,
    pack,
    read_bitstream_file,
    unpack,
    write_bitstream_file,
)
from .grids import (
    GroupedLatent,
    HyperContext,
    LatentGrid,
    SourceConfig,
    block_means,
    crop,
    extract_hyper_context,
    gauss_markov_sample,
    merge_groups,
    partition_quadtree,
    read_latent_file,
    replicate_pad,
    rng_for,
    write_latent_file,
)
from .quantizers import (
    Codebook,
    IndexStack,
    QuantizerSet,
    ResidualVQ,
    codebook_report,
    dequantize,
    nn_quantize,
    read_codebook_file,
    rvq_quantize,
    train_codebook,
    train_rvq,
    write_codebook_file,
)
from .rans import (
    FrequencyTable,
    RansStream,
    discretized_gaussian_table,
    gaussian_cdf,
    gaussian_table_batch,
    normalize_frequencies,
    rans_decode,
    rans_encode,
)
from .schemes import (
    CodedLatent,
    ContextPredictor,
    SchemeConfig,
    cm_decode,
    cm_encode,
    fit_context_predictor,
    fixed_length_bits,
    iq_decode,
    iq_encode,
    rd_decode,
    rd_encode,
    read_predictor_file,
    train_cm_model,
    train_iq_model,
    train_rd_model,
    write_predictor_file,
)
from .timing import PhaseTimer

__all__ = [name for name in dir() if not name.startswith("_")]
