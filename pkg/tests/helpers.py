from __future__ import annotations

from buding_asr.config import AsrConfig, DecoderConfig, EncoderConfig, GenerationConfig, TrainConfig


def tiny_config(**train_overrides) -> AsrConfig:
    """几秒内能跑完一个 epoch 的小模型与小语料"""
    cfg = AsrConfig(
        data=GenerationConfig(num_tokens=4, feature_dim=6, duration_min=4, duration_max=6, noise_std=0.1,
                              transcript_min=2, transcript_max=4, num_train=12, num_dev=4, num_test=4,
                              num_text_sentences=40),
        encoder=EncoderConfig(d_model=16, num_heads=2, d_ff=32, num_layers=1, conv_kernel=3, subsample=4,
                              block_length=2),
        decoder=DecoderConfig(d_model=16, num_heads=2, d_ff=32, num_layers=1, max_prompts=128, max_tokens=32),
        train=TrainConfig(epochs=1, batch_size=4, warmup_steps=4),
    )
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg
