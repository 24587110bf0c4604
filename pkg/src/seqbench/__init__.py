"""seqbench: desk-scale transformer seq2seq engine and decoding benchmark.

Subpackages:
  kernels / autodiff  instrumented dense kernels and the reverse-mode tape
  model               encoder-decoder with configurable E/D depths,
                      cached causal decoding, bidirectional passes
  decode              greedy, beam, mask-predict, easy-first strategies
  train               losses, Adam + inverse-sqrt schedule, distillation
  tasks               synthetic copy / reorder / multimodal corpora
  bench               S1 and Smax timing, operation-count model, reports
  cli                 the `seqbench` command
"""

__version__ = "0.1.0"
