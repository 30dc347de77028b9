#pragma once

#include <vector>

#include "sigmt/corpus.hpp"
#include "sigmt/model.hpp"

namespace sigmt {

/// Full forward pass for one example. `sources` holds one token sequence per
/// encoder; `target_prefix` is the decoder input as-is (callers include BOS).
/// Returns one log-softmax-normalized row per prefix position, each scoring
/// the next token.
template <typename S>
Mat<S> forward(const ModelConfig& config, const ParamMap<S>& params,
               const std::vector<std::vector<int>>& sources,
               const std::vector<int>& target_prefix);

/// Encoder-only pass; returns the memory rows fed to cross-attention (one
/// per source token).
template <typename S>
Mat<S> encode_memory(const ModelConfig& config, const ParamMap<S>& params,
                     const std::vector<int>& source, int encoder_index = 0);

template <typename S>
struct LossGrad {
  double loss = 0.0;
  long long target_positions = 0;
  ParamMap<S> grads;
};

/// Label-smoothed cross entropy (uniform over non-PAD vocabulary), averaged
/// over non-PAD target positions, with exact analytic gradients. Targets get
/// EOS appended and BOS prepended internally. `dropout_rng` enables dropout
/// (training); pass nullptr for deterministic evaluation semantics.
template <typename S>
LossGrad<S> backward(const ModelConfig& config, const ParamMap<S>& params,
                     const std::vector<const TrainExample*>& batch,
                     double label_smoothing, Rng* dropout_rng = nullptr);

/// Loss only (no gradients, no dropout).
template <typename S>
double evaluate_loss(const ModelConfig& config, const ParamMap<S>& params,
                     const std::vector<const TrainExample*>& batch,
                     double label_smoothing);

/// Memory lengths each decoder cross-attention attends over, per layer (for
/// flat mode this is the concatenated length).
template <typename S>
std::vector<long> cross_attention_widths(
    const ModelConfig& config, const ParamMap<S>& params,
    const std::vector<std::vector<int>>& sources,
    const std::vector<int>& target_prefix);

/// Incremental decoding for one sentence: encoder memories and per-layer
/// cross K/V are computed once, decoder self-attention K/V grow per step.
/// States are value types so beam search can branch hypotheses cheaply.
template <typename S>
class DecodeSession {
 public:
  DecodeSession(const ModelConfig& config, const ParamMap<S>& params,
                const std::vector<std::vector<int>>& sources);

  struct State {
    std::vector<Mat<S>> self_k, self_v;  // per decoder layer
    int len = 0;
  };

  State make_state() const;

  /// Feeds `token` (BOS first) and returns log probabilities of the next
  /// token. Matches forward() up to floating-point accumulation order.
  std::vector<double> step(State& state, int token) const;

  const Mat<S>& memory(int encoder_index) const {
    return memories_[static_cast<std::size_t>(encoder_index)];
  }

 private:
  const ModelConfig* config_;
  const ParamMap<S>* params_;
  std::vector<Mat<S>> memories_;                 // per encoder, post-projection
  std::vector<std::vector<Mat<S>>> cross_k_;     // [layer][attended memory]
  std::vector<std::vector<Mat<S>>> cross_v_;
};

}  // namespace sigmt
