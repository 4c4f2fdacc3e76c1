#!/usr/bin/env python

# 日志设置
LOG_LEVEL = "INFO"

# 训练设置
MARGIN = 0.2
BASE_LR = 1e-5
BATCH_SIZE = 16
# lr 每 LR_DECAY_PERIOD 个 epoch 乘以 LR_DECAY_FACTOR
LR_DECAY_PERIOD = 15
LR_DECAY_FACTOR = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EPOCHS = 30
# 每隔多少个 epoch 保存一次 checkpoint, 0 表示只保存 final.ckpt
CHECKPOINT_EVERY = 0

# 模型结构设置
EMBED_DIM = 1024
HIDDEN_DIM = 2048
PRE_LAYERS = 1
POST_LAYERS = 1
HEADS = 2
# Transformer feedforward 宽度 = FF_MULT * 输入宽度
FF_MULT = 2

# 数值设置
COSINE_EPS = 1e-8
LAYER_NORM_EPS = 1e-6

# 梯度检查设置
GRADCHECK_STEP = 1e-5
GRADCHECK_TOL = 1e-4
# 相对误差的分母接近 0 时, 绝对误差小于该值也视为通过
GRADCHECK_INSTANCES = 20
GRADCHECK_COORDINATES = 50

# 评估设置
RECALL_KS = (1, 5, 10)
# 大于 1 时按 caption 行并行计算相似度矩阵
EVAL_WORKERS = 1

# 文件格式
CHECKPOINT_MAGIC = b"CPFE"
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1
