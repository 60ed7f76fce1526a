"""Purpose tags that head every RngStream path, so no two consumers share a stream."""

MODEL_INIT = 1
PRETRAIN = 2
DATA_GEN = 3
PARTITION = 4
ADAPTER_INIT = 5
LOCAL_SHUFFLE = 6
DROPOUT = 7
PARTICIPATION = 8
EVAL_SPLIT = 9

# client slot used for streams every client shares
SHARED = 2**31
