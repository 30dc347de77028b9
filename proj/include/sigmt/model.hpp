#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sigmt/util.hpp"

namespace sigmt {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// How the decoder combines cross-attention over multiple encoders.
enum class CrossAttentionMode { Serial, Parallel, Flat, Hierarchical };

std::string to_string(CrossAttentionMode mode);
std::optional<CrossAttentionMode> cross_mode_from_string(std::string_view s);

struct ModelConfig {
  int encoder_layers = 6;
  int decoder_layers = 6;
  int embed_dim = 512;
  int encoder_embed_dim = 0;  // 0 means "same as embed_dim"
  int hidden_dim = 2048;
  int heads = 8;
  int num_encoders = 1;
  CrossAttentionMode cross_attention_mode = CrossAttentionMode::Parallel;
  double dropout = 0.2;
  double attention_dropout = 0.2;
  int vocab_size = 0;
  int max_positions = 256;

  int enc_embed_dim() const {
    return encoder_embed_dim > 0 ? encoder_embed_dim : embed_dim;
  }
  /// Encoder feed-forward width scales with the encoder embedding dim so a
  /// widened encoder stays proportioned.
  int encoder_hidden_dim() const {
    return static_cast<int>(static_cast<long long>(hidden_dim) *
                            enc_embed_dim() / embed_dim);
  }
  /// A widened encoder projects its output back to embed_dim so every
  /// decoder tensor keeps its shape.
  bool has_encoder_projection() const { return enc_embed_dim() != embed_dim; }

  void validate() const;
};

struct TensorShape {
  std::string name;
  long rows = 0;
  long cols = 0;
};

/// Declares every tensor of a model, in canonical order. init_params,
/// count_params, checkpoints and the forward/backward passes all agree on
/// this single manifest.
std::vector<TensorShape> tensor_manifest(const ModelConfig& config);

long long count_params(const ModelConfig& config);

/// Widens encoder_embed_dim (in steps of `heads`) until the model holds at
/// least n times the parameters of `config`. Decoder tensors are untouched.
ModelConfig scale_encoder_dim(const ModelConfig& config, int n);

/// Named tensor store. Training uses float; gradient checking instantiates
/// the same code in double.
template <typename S>
struct ParamMap {
  std::map<std::string, Mat<S>> tensors;

  Mat<S>& at(const std::string& name);
  const Mat<S>& at(const std::string& name) const;
  bool contains(const std::string& name) const {
    return tensors.count(name) > 0;
  }
  long long element_count() const;

  template <typename T>
  ParamMap<T> cast() const {
    ParamMap<T> out;
    for (const auto& [name, m] : tensors)
      out.tensors.emplace(name, m.template cast<T>());
    return out;
  }
};

using Parameters = ParamMap<float>;

/// Seeded scaled-uniform initialization (range 1/sqrt(fan_in)); biases zero,
/// layer-norm gains one. Deterministic: same (config, seed) gives identical
/// parameters.
template <typename S>
ParamMap<S> init_params(const ModelConfig& config, std::uint64_t seed);

struct Checkpoint {
  ModelConfig config;
  long long step = 0;
  double dev_loss = 0.0;
  Parameters params;
};

/// Versioned text header (config, step, dev loss) followed by named raw
/// little-endian f32 tensors. save(load(x)) is byte-identical to save(x).
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sigmt
