"""rowctc: multi-task CTC word-image recognition with a row-label auxiliary
head, a synthetic glyph dataset pipeline, and WER/CER evaluation."""

from .alphabet import (
    LabelMap,
    LabelMapError,
    default_label_map,
    label_map_hash,
    load_label_map,
    rows_of,
    save_label_map,
)
from .ctc_core import (
    CtcInfeasibleError,
    CtcLattice,
    brute_force_likelihood,
    collapse,
    ctc_grad,
    ctc_loss,
    extend_labels,
    log_softmax,
    logsumexp,
    min_timesteps,
    total_loss,
)
from .decode_metrics import (
    EvalReport,
    edit_distance,
    evaluate,
    greedy_decode,
    parse_eval_report,
    save_eval_report,
)
from .glyphforge import (
    DatasetManifest,
    DirectoryAtlas,
    GlyphImage,
    GlyphMissingError,
    ManifestError,
    SyntheticAtlas,
    WordSample,
    build_dataset,
    compose_word_image,
    expected_counts,
    export_atlas,
    iterate_split,
    load_manifest,
    plan_writer_splits,
    random_words,
    save_manifest,
    synth_glyph,
)
from .net import (
    CheckpointError,
    DivergenceError,
    Model,
    ModelConfig,
    forward,
    init_model,
    load_checkpoint,
    sample_losses,
    save_checkpoint,
    train_step,
)

__version__ = "0.1.0"
