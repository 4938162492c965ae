# Recorded session file magic and format version.
SESSION_MAGIC = b'TRAVSESS'
SESSION_VERSION = 1
# Model checkpoint file magic and format version.
CHECKPOINT_MAGIC = b'TRAVMODL'
CHECKPOINT_VERSION = 1
# Memory snapshot schema identifier and version.
SNAPSHOT_FORMAT = 'continual-traversability.memory-snapshot'
SNAPSHOT_VERSION = 1
# Report schema version (CSV rows and JSON summaries).
REPORT_VERSION = 1

# Replay strategies.
STRATEGY_IDM = 'idm'
STRATEGY_FIFO = 'fifo'
STRATEGY_UNBOUNDED = 'unbounded_random'
STRATEGIES = (STRATEGY_IDM, STRATEGY_FIFO, STRATEGY_UNBOUNDED)

# Memory insert outcomes.
INSERT_NEW_CLUSTER = 'new_cluster'
INSERT_ASSIGNED = 'assigned'
INSERT_ASSIGNED_WITH_EVICTION = 'assigned_with_eviction'

# Segmentation sources.
SEGMENTER_ORACLE = 'oracle'
SEGMENTER_RECORDED = 'recorded'

# Learner regularization variants.
REGULARIZATION_CYCLE = 'cycle'
REGULARIZATION_PRIOR = 'prior'

# Optimizers.
OPTIMIZER_SGD = 'sgd'
OPTIMIZER_ADAM = 'adam'

# Scene layouts.
LAYOUT_BANDS = 'bands'
LAYOUT_BLOBS = 'blobs'

# Environment variable with the default output root.
OUTPUT_ROOT_ENV = 'CONTINUAL_TRAVERSABILITY_OUTPUT_ROOT'

# Artifact file names inside a run directory.
ARTIFACT_REPORT_CSV = 'report.csv'
ARTIFACT_SUMMARY_JSON = 'summary.json'
ARTIFACT_MEMORY_JSON = 'memory.json'
ARTIFACT_CHECKPOINT = 'model.ckpt'
ARTIFACT_MANIFEST = 'manifest.json'
ARTIFACT_COMPARISON_CSV = 'comparison.csv'
ARTIFACT_COMPARISON_JSON = 'comparison.json'
ARTIFACT_SWEEP_CSV = 'sweep.csv'
