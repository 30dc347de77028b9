#include "sigmt/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sigmt {

std::string to_string(CrossAttentionMode mode) {
  switch (mode) {
    case CrossAttentionMode::Serial: return "serial";
    case CrossAttentionMode::Parallel: return "parallel";
    case CrossAttentionMode::Flat: return "flat";
    case CrossAttentionMode::Hierarchical: return "hierarchical";
  }
  return "?";
}

std::optional<CrossAttentionMode> cross_mode_from_string(std::string_view s) {
  if (s == "serial") return CrossAttentionMode::Serial;
  if (s == "parallel") return CrossAttentionMode::Parallel;
  if (s == "flat") return CrossAttentionMode::Flat;
  if (s == "hierarchical") return CrossAttentionMode::Hierarchical;
  return std::nullopt;
}

void ModelConfig::validate() const {
  if (encoder_layers < 1 || decoder_layers < 1)
    fail("model config: layer counts must be >= 1");
  if (embed_dim < 2 || embed_dim % 2 != 0)
    fail("model config: embed_dim must be even and >= 2");
  if (heads < 1) fail("model config: heads must be >= 1");
  if (embed_dim % heads != 0)
    fail("model config: embed_dim " + std::to_string(embed_dim) +
         " not divisible by heads " + std::to_string(heads));
  if (enc_embed_dim() % heads != 0 || enc_embed_dim() % 2 != 0)
    fail("model config: encoder_embed_dim " + std::to_string(enc_embed_dim()) +
         " must be even and divisible by heads");
  if (hidden_dim < 1 || encoder_hidden_dim() < 1)
    fail("model config: hidden dims must be positive");
  if (num_encoders < 1) fail("model config: num_encoders must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0 || attention_dropout < 0.0 ||
      attention_dropout >= 1.0)
    fail("model config: dropout rates must be in [0, 1)");
  if (vocab_size < 6) fail("model config: vocab_size too small");
  if (max_positions < 1) fail("model config: max_positions must be >= 1");
}

namespace {

void push_attention(std::vector<TensorShape>& out, const std::string& prefix,
                    long query_dim, long mem_dim) {
  out.push_back({prefix + ".wq", query_dim, query_dim});
  out.push_back({prefix + ".bq", 1, query_dim});
  out.push_back({prefix + ".wk", mem_dim, query_dim});
  out.push_back({prefix + ".bk", 1, query_dim});
  out.push_back({prefix + ".wv", mem_dim, query_dim});
  out.push_back({prefix + ".bv", 1, query_dim});
  out.push_back({prefix + ".wo", query_dim, query_dim});
  out.push_back({prefix + ".bo", 1, query_dim});
}

void push_ln(std::vector<TensorShape>& out, const std::string& prefix,
             long dim) {
  out.push_back({prefix + ".g", 1, dim});
  out.push_back({prefix + ".b", 1, dim});
}

}  // namespace

std::vector<TensorShape> tensor_manifest(const ModelConfig& config) {
  config.validate();
  std::vector<TensorShape> out;
  const long V = config.vocab_size;
  const long E = config.embed_dim;
  const long Ee = config.enc_embed_dim();
  const long F = config.hidden_dim;
  const long Fe = config.encoder_hidden_dim();
  const int K = config.num_encoders;

  for (int k = 0; k < K; ++k) {
    const std::string enc = "enc" + std::to_string(k);
    out.push_back({enc + ".embed", V, Ee});
    for (int i = 0; i < config.encoder_layers; ++i) {
      const std::string l = enc + ".l" + std::to_string(i);
      push_ln(out, l + ".ln1", Ee);
      push_attention(out, l + ".self", Ee, Ee);
      push_ln(out, l + ".ln2", Ee);
      out.push_back({l + ".ffn.w1", Ee, Fe});
      out.push_back({l + ".ffn.b1", 1, Fe});
      out.push_back({l + ".ffn.w2", Fe, Ee});
      out.push_back({l + ".ffn.b2", 1, Ee});
    }
    push_ln(out, enc + ".ln", Ee);
    if (config.has_encoder_projection()) {
      out.push_back({enc + ".proj.w", Ee, E});
      out.push_back({enc + ".proj.b", 1, E});
    }
  }

  out.push_back({"dec.embed", V, E});
  // A single encoder always uses the plain single-cross layout; the mode
  // only matters with two or more encoders.
  const bool single_cross =
      K == 1 || config.cross_attention_mode == CrossAttentionMode::Flat;
  for (int i = 0; i < config.decoder_layers; ++i) {
    const std::string l = "dec.l" + std::to_string(i);
    push_ln(out, l + ".ln1", E);
    push_attention(out, l + ".self", E, E);
    if (single_cross) {
      push_ln(out, l + ".ln2", E);
      push_attention(out, l + ".cross", E, E);
    } else if (config.cross_attention_mode == CrossAttentionMode::Serial) {
      for (int k = 0; k < K; ++k) {
        push_ln(out, l + ".ln2_" + std::to_string(k), E);
        push_attention(out, l + ".cross" + std::to_string(k), E, E);
      }
    } else {  // parallel or hierarchical
      push_ln(out, l + ".ln2", E);
      for (int k = 0; k < K; ++k)
        push_attention(out, l + ".cross" + std::to_string(k), E, E);
      if (config.cross_attention_mode == CrossAttentionMode::Hierarchical)
        push_attention(out, l + ".hier", E, E);
    }
    push_ln(out, l + ".ln3", E);
    out.push_back({l + ".ffn.w1", E, F});
    out.push_back({l + ".ffn.b1", 1, F});
    out.push_back({l + ".ffn.w2", F, E});
    out.push_back({l + ".ffn.b2", 1, E});
  }
  push_ln(out, "dec.ln", E);
  out.push_back({"dec.out.w", E, V});
  out.push_back({"dec.out.b", 1, V});
  return out;
}

long long count_params(const ModelConfig& config) {
  long long total = 0;
  for (const TensorShape& t : tensor_manifest(config))
    total += static_cast<long long>(t.rows) * t.cols;
  return total;
}

ModelConfig scale_encoder_dim(const ModelConfig& config, int n) {
  if (n < 1) fail("scale_encoder_dim: n must be >= 1");
  if (n == 1) return config;
  const long long target = n * count_params(config);
  ModelConfig scaled = config;
  scaled.encoder_embed_dim = config.enc_embed_dim();
  while (count_params(scaled) < target)
    scaled.encoder_embed_dim += config.heads;
  return scaled;
}

template <typename S>
Mat<S>& ParamMap<S>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail("parameters: no tensor named '" + name + "'");
  return it->second;
}

template <typename S>
const Mat<S>& ParamMap<S>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail("parameters: no tensor named '" + name + "'");
  return it->second;
}

template <typename S>
long long ParamMap<S>::element_count() const {
  long long total = 0;
  for (const auto& [name, m] : tensors) total += m.size();
  return total;
}

namespace {

bool is_bias_tensor(const std::string& name) {
  std::size_t dot = name.rfind('.');
  std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return !leaf.empty() && leaf[0] == 'b';
}

bool is_gain_tensor(const std::string& name) {
  return name.size() >= 2 && name.compare(name.size() - 2, 2, ".g") == 0;
}

bool is_embedding_tensor(const std::string& name) {
  return name.size() >= 6 &&
         name.compare(name.size() - 6, 6, ".embed") == 0;
}

}  // namespace

template <typename S>
ParamMap<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  ParamMap<S> params;
  Rng rng(seed);
  for (const TensorShape& shape : tensor_manifest(config)) {
    Mat<S> m(shape.rows, shape.cols);
    if (is_gain_tensor(shape.name)) {
      m.setOnes();
    } else if (is_bias_tensor(shape.name)) {
      m.setZero();
    } else {
      const long fan_in = is_embedding_tensor(shape.name) ? shape.cols
                                                          : shape.rows;
      const double range = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (long r = 0; r < shape.rows; ++r)
        for (long c = 0; c < shape.cols; ++c)
          m(r, c) = static_cast<S>(rng.uniform(-range, range));
    }
    params.tensors.emplace(shape.name, std::move(m));
  }
  return params;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const ModelConfig& c = ckpt.config;
  std::ostringstream head;
  head << "sigmt-checkpoint v1\n";
  head << "config.encoder_layers " << c.encoder_layers << "\n";
  head << "config.decoder_layers " << c.decoder_layers << "\n";
  head << "config.embed_dim " << c.embed_dim << "\n";
  head << "config.encoder_embed_dim " << c.enc_embed_dim() << "\n";
  head << "config.hidden_dim " << c.hidden_dim << "\n";
  head << "config.heads " << c.heads << "\n";
  head << "config.num_encoders " << c.num_encoders << "\n";
  head << "config.cross_attention_mode " << to_string(c.cross_attention_mode)
       << "\n";
  head << "config.dropout " << format_double(c.dropout) << "\n";
  head << "config.attention_dropout " << format_double(c.attention_dropout)
       << "\n";
  head << "config.vocab_size " << c.vocab_size << "\n";
  head << "config.max_positions " << c.max_positions << "\n";
  head << "step " << ckpt.step << "\n";
  head << "dev_loss " << format_double(ckpt.dev_loss) << "\n";
  head << "tensors " << ckpt.params.tensors.size() << "\n";

  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write checkpoint: " + path.string());
  out << head.str();
  for (const auto& [name, m] : ckpt.params.tensors) {
    out << "tensor " << name << " " << m.rows() << " " << m.cols() << "\n";
    // Row-major float32 payload.
    static_assert(Mat<float>::IsRowMajor);
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(float) * m.size()));
  }
  if (!out) fail("checkpoint write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint: " + path.string());
  auto next_line = [&]() {
    std::string line;
    if (!std::getline(in, line))
      fail(path.string() + ": truncated checkpoint header");
    return line;
  };
  auto kv = [&](const std::string& line, const std::string& key) {
    if (line.rfind(key + " ", 0) != 0)
      fail(path.string() + ": expected '" + key + "', got '" + line + "'");
    return line.substr(key.size() + 1);
  };

  if (next_line() != "sigmt-checkpoint v1")
    fail(path.string() + ": unsupported checkpoint version");
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.encoder_layers = static_cast<int>(
      parse_int(kv(next_line(), "config.encoder_layers"), path.string()));
  c.decoder_layers = static_cast<int>(
      parse_int(kv(next_line(), "config.decoder_layers"), path.string()));
  c.embed_dim = static_cast<int>(
      parse_int(kv(next_line(), "config.embed_dim"), path.string()));
  c.encoder_embed_dim = static_cast<int>(
      parse_int(kv(next_line(), "config.encoder_embed_dim"), path.string()));
  c.hidden_dim = static_cast<int>(
      parse_int(kv(next_line(), "config.hidden_dim"), path.string()));
  c.heads = static_cast<int>(
      parse_int(kv(next_line(), "config.heads"), path.string()));
  c.num_encoders = static_cast<int>(
      parse_int(kv(next_line(), "config.num_encoders"), path.string()));
  auto mode = cross_mode_from_string(
      kv(next_line(), "config.cross_attention_mode"));
  if (!mode) fail(path.string() + ": bad cross_attention_mode");
  c.cross_attention_mode = *mode;
  c.dropout = parse_double(kv(next_line(), "config.dropout"), path.string());
  c.attention_dropout =
      parse_double(kv(next_line(), "config.attention_dropout"), path.string());
  c.vocab_size = static_cast<int>(
      parse_int(kv(next_line(), "config.vocab_size"), path.string()));
  c.max_positions = static_cast<int>(
      parse_int(kv(next_line(), "config.max_positions"), path.string()));
  ckpt.step = parse_int(kv(next_line(), "step"), path.string());
  ckpt.dev_loss = parse_double(kv(next_line(), "dev_loss"), path.string());
  long long tensors = parse_int(kv(next_line(), "tensors"), path.string());

  for (long long t = 0; t < tensors; ++t) {
    std::string line = next_line();
    std::vector<std::string> parts = split_ws(line);
    if (parts.size() != 4 || parts[0] != "tensor")
      fail(path.string() + ": malformed tensor header '" + line + "'");
    long rows = static_cast<long>(parse_int(parts[2], path.string()));
    long cols = static_cast<long>(parse_int(parts[3], path.string()));
    Mat<float> m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * m.size()));
    if (!in) fail(path.string() + ": truncated tensor data for " + parts[1]);
    ckpt.params.tensors.emplace(parts[1], std::move(m));
  }

  // Shape audit against the manifest.
  auto manifest = tensor_manifest(c);
  if (manifest.size() != ckpt.params.tensors.size())
    fail(path.string() + ": tensor count does not match config");
  for (const TensorShape& s : manifest) {
    const Mat<float>& m = ckpt.params.at(s.name);
    if (m.rows() != s.rows || m.cols() != s.cols)
      fail(path.string() + ": tensor " + s.name + " has shape " +
           std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
           ", expected " + std::to_string(s.rows) + "x" +
           std::to_string(s.cols));
  }
  return ckpt;
}

template struct ParamMap<float>;
template struct ParamMap<double>;
template ParamMap<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ParamMap<double> init_params<double>(const ModelConfig&, std::uint64_t);

}  // namespace sigmt
