# buding_asr: 解码器流式语音识别核心库
# 各模块按流水线顺序：nd_core → synth_corpus → speech_subnet → ctc_engine →
# prompt_gen → prompt_decoder → train_pipeline → fusion_search → evaluation

__version__ = "1.0.0"
