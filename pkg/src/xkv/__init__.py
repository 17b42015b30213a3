"""Cross-layer KV-cache compression toolkit.

Caches from adjacent transformer layers share most of their dominant
singular directions; one truncated SVD over a group of concatenated
layer caches stores a single token basis plus tiny per-layer mixers and
beats per-layer SVD at equal budget.  The package covers the loop:
dump format, similarity analysis, compression, attention-level
fidelity evaluation, and a CLI tying them together.
"""

from .errors import (
    BadMagic,
    ConfigError,
    EmptySpectrum,
    GramTooLarge,
    HeaderMismatch,
    HeadMismatch,
    IndivisibleGrouping,
    InvalidConfig,
    IoFailure,
    KeysNotPreRope,
    NonFinite,
    OddHeadDim,
    RankTooLarge,
    RanksExceedDims,
    Unachievable,
    UnsupportedDtype,
    XkvError,
)
from .kvdump import (
    CacheDump,
    CacheMeta,
    LayerCache,
    SynthConfig,
    expected_payload_bytes,
    quantize_like,
    read_dump,
    synth_dump,
    with_meta,
    write_dump,
)
from .linalg import (
    TruncatedSVD,
    center_rows,
    energy_rank,
    singular_values,
    svd_auto,
    svd_randomized,
    svd_truncated,
)
from .analysis import (
    RankCurve,
    SimilarityMatrix,
    cka_feature,
    cka_gram,
    cka_matrix,
    cka_svd_overlap,
    concat_energy_rank,
    cosine_similarity_matrix,
    rank_curve,
)
from .compress import (
    CompressedDump,
    CompressedGroup,
    CompressionPlan,
    LayerGroup,
    SlerpMerged,
    compress,
    compression_rate,
    derive_value_rank,
    plan_storage_elements,
    rank_for_rate,
    read_compressed,
    reconstruct,
    single_svd_compress,
    slerp_merge,
    stored_elements,
    stride_groups,
    write_compressed,
    xkv_compress,
)
from .atteval import (
    FidelityReport,
    LayerFidelity,
    QuerySource,
    RopeConfig,
    apply_rope,
    attention_forward,
    evaluate,
)

__version__ = "0.1.0"
