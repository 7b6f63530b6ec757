"""
Test configuration shared by the ktpformer suites: tolerances, the standard
model sizes and the hand-derived metric oracles.
"""

# Tolerances
GRADCHECK_TOLERANCE = 1e-4          # max relative error, backward vs central differences
SYMMETRY_TOLERANCE = 1e-15
DEGRADATION_TOLERANCE = 1e-12
ATTENTION_ROW_TOLERANCE = 1e-9
SIMILARITY_INVARIANCE_TOLERANCE = 1e-9
BONE_LENGTH_TOLERANCE = 1e-9

# Model sizes (keyword arguments for ModelConfig)
TINY_CONFIG = dict(frames=4, joints=5, channels=8, heads=2, depth=1, mode='SMD', skeleton='chain')
DESK_CONFIG = dict(frames=27, joints=17, channels=64, heads=4, depth=2, mode='SMD')
FULL_CONFIG = dict(frames=243, joints=17, channels=512, heads=8, depth=7, mode='SMD')

# Configurations the parameter accounting is checked on
ACCOUNTING_CONFIGS = [
    TINY_CONFIG,
    DESK_CONFIG,
    FULL_CONFIG,
    dict(frames=9, joints=17, channels=32, heads=4, depth=0, mode='UMD'),
    dict(frames=81, joints=16, channels=128, heads=8, depth=3, mode='PMD', skeleton='chain'),
    dict(frames=27, joints=17, channels=64, heads=4, depth=2, mode='SMD-S'),
    dict(frames=27, joints=17, channels=64, heads=4, depth=2, mode='BASELINE'),
]

# Metric oracles
OFFSET_FIXTURE_MPJPE = 2.5          # one of two joints off by (3, 4, 0) mm, one frame
OFFSET_FIXTURE_PCK = 50.0           # one of two joints off by 200 mm, 150 mm threshold
RANDOM_PAIR_COUNT = 1000

# Slow acceptance runs (enabled with KTP_SLOW_TESTS=True)
OVERFIT_STEPS = 2000
OVERFIT_LEARNING_RATE = 1.5e-3
OVERFIT_LR_DECAY = 0.9975         # per step on one clip; ends near 1e-5
OVERFIT_BONE_FRACTION = 0.02
TREND_STEPS = 200
