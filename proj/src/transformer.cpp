#include "sigmt/transformer.hpp"

#include <cmath>

namespace sigmt {

namespace {

constexpr double kLnEps = 1e-5;

template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
S gelu(S x) {
  return static_cast<S>(0.5) * x *
         (static_cast<S>(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
}

template <typename S>
S gelu_grad(S x) {
  const S phi = static_cast<S>(0.5) *
                (static_cast<S>(1) + std::erf(x * static_cast<S>(M_SQRT1_2)));
  const S pdf = std::exp(static_cast<S>(-0.5) * x * x) *
                static_cast<S>(0.3989422804014327);
  return phi + x * pdf;
}

// ---------------------------------------------------------------------------
// Packed batches: sequences concatenated row-wise, offsets delimiting them.
// ---------------------------------------------------------------------------
template <typename S>
struct Pack {
  Mat<S> x;
  std::vector<long> off;

  int batch() const { return static_cast<int>(off.size()) - 1; }
  long len(int b) const { return off[b + 1] - off[b]; }
  auto block(int b) { return x.middleRows(off[b], len(b)); }
  auto block(int b) const { return x.middleRows(off[b], len(b)); }
};

template <typename S>
struct LNTape {
  Mat<S> xhat;
  Vec<S> inv;
};

template <typename S>
struct DropTape {
  Mat<S> mult;
  bool active = false;
};

template <typename S>
struct AttnTape {
  Mat<S> qin, min_;
  Mat<S> q, k, v;
  std::vector<Mat<S>> probs;     // per (sequence, head), pre-dropout
  std::vector<Mat<S>> dropmult;  // aligned with probs; empty if inactive
  Mat<S> ctx;
  std::vector<long> qoff, moff;
};

template <typename S>
struct FfnTape {
  Mat<S> xin, h1, act;
};

template <typename S>
struct EncLayerTape {
  LNTape<S> ln1;
  AttnTape<S> self;
  DropTape<S> self_drop;
  LNTape<S> ln2;
  FfnTape<S> ffn;
  DropTape<S> ffn_drop;
};

template <typename S>
struct EncoderTape {
  std::vector<int> ids;
  DropTape<S> embed_drop;
  std::vector<EncLayerTape<S>> layers;
  LNTape<S> ln_final;
  Mat<S> pre_proj;  // post-final-LN rows, input to the output projection
  Pack<S> memory;
};

template <typename S>
struct HierTape {
  Mat<S> xn;
  std::vector<Mat<S>> ctx;  // per-encoder context block outputs
  Mat<S> q2;
  std::vector<Mat<S>> key, val;
  Mat<S> alpha;  // [T x K]
  Mat<S> h;
};

template <typename S>
struct DecLayerTape {
  LNTape<S> ln1;
  AttnTape<S> self;
  DropTape<S> self_drop;
  std::vector<LNTape<S>> cross_ln;
  std::vector<AttnTape<S>> cross;
  std::vector<DropTape<S>> cross_drop;
  HierTape<S> hier;
  LNTape<S> ln3;
  FfnTape<S> ffn;
  DropTape<S> ffn_drop;
};

template <typename S>
struct DecoderTape {
  std::vector<int> ids;
  DropTape<S> embed_drop;
  std::vector<DecLayerTape<S>> layers;
  LNTape<S> ln_final;
  Mat<S> final_out;
};

template <typename S>
ParamMap<S> zeros_like(const ParamMap<S>& p) {
  ParamMap<S> out;
  for (const auto& [name, m] : p.tensors)
    out.tensors.emplace(name, Mat<S>::Zero(m.rows(), m.cols()));
  return out;
}

bool single_cross_layout(const ModelConfig& cfg) {
  return cfg.num_encoders == 1 ||
         cfg.cross_attention_mode == CrossAttentionMode::Flat;
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <typename S>
Mat<S> ln_forward(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b,
                  LNTape<S>& tape) {
  const long R = x.rows(), D = x.cols();
  tape.xhat.resize(R, D);
  tape.inv.resize(R);
  Mat<S> y(R, D);
  for (long r = 0; r < R; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().sum() / static_cast<S>(D);
    const S inv = static_cast<S>(1) / std::sqrt(var + static_cast<S>(kLnEps));
    tape.inv(r) = inv;
    tape.xhat.row(r) = (x.row(r).array() - mu) * inv;
    y.row(r) = tape.xhat.row(r).cwiseProduct(g.row(0)) + b.row(0);
  }
  return y;
}

template <typename S>
Mat<S> ln_backward(const Mat<S>& dy, const Mat<S>& g, const LNTape<S>& tape,
                   Mat<S>& dg, Mat<S>& db) {
  const long R = dy.rows(), D = dy.cols();
  Mat<S> dx(R, D);
  for (long r = 0; r < R; ++r) {
    Eigen::Matrix<S, 1, Eigen::Dynamic> t =
        dy.row(r).cwiseProduct(g.row(0));
    const S m1 = t.mean();
    const S m2 = t.cwiseProduct(tape.xhat.row(r)).mean();
    dx.row(r) =
        ((t.array() - m1) - tape.xhat.row(r).array() * m2) * tape.inv(r);
    dg.row(0) += dy.row(r).cwiseProduct(tape.xhat.row(r));
    db.row(0) += dy.row(r);
  }
  return dx;
}

template <typename S>
Mat<S> linear(const Mat<S>& x, const Mat<S>& w, const Mat<S>& b) {
  Mat<S> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename S>
void make_dropout(DropTape<S>& tape, long rows, long cols, double p,
                  Rng* rng) {
  if (!rng || p <= 0.0) {
    tape.active = false;
    return;
  }
  tape.active = true;
  tape.mult.resize(rows, cols);
  const S keep = static_cast<S>(1.0 / (1.0 - p));
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c)
      tape.mult(r, c) = rng->real01() < p ? static_cast<S>(0) : keep;
}

template <typename S>
void apply_dropout(Mat<S>& x, const DropTape<S>& tape) {
  if (tape.active) x = x.cwiseProduct(tape.mult);
}

/// Multi-head scaled-dot attention over packed sequences. `causal` restricts
/// each query row to memory positions at or before it (self-attention only).
template <typename S>
Mat<S> attention_forward(const ParamMap<S>& P, const std::string& prefix,
                         const Mat<S>& qin, const std::vector<long>& qoff,
                         const Mat<S>& min_, const std::vector<long>& moff,
                         int heads, bool causal, double attn_dropout, Rng* rng,
                         AttnTape<S>& tape) {
  const long D = qin.cols();
  const long dh = D / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const int B = static_cast<int>(qoff.size()) - 1;

  tape.qin = qin;
  tape.min_ = min_;
  tape.qoff = qoff;
  tape.moff = moff;
  tape.q = linear(qin, P.at(prefix + ".wq"), P.at(prefix + ".bq"));
  tape.k = linear(min_, P.at(prefix + ".wk"), P.at(prefix + ".bk"));
  tape.v = linear(min_, P.at(prefix + ".wv"), P.at(prefix + ".bv"));
  tape.ctx.setZero(qin.rows(), D);
  tape.probs.assign(static_cast<std::size_t>(B) * heads, Mat<S>());
  tape.dropmult.clear();
  const bool adrop = rng && attn_dropout > 0.0;
  if (adrop) tape.dropmult.assign(static_cast<std::size_t>(B) * heads, Mat<S>());

  for (int b = 0; b < B; ++b) {
    const long sq = qoff[b + 1] - qoff[b];
    const long sm = moff[b + 1] - moff[b];
    if (sq == 0) continue;
    if (sm == 0) fail("attention: empty memory sequence");
    for (int h = 0; h < heads; ++h) {
      auto qh = tape.q.block(qoff[b], h * dh, sq, dh);
      auto kh = tape.k.block(moff[b], h * dh, sm, dh);
      auto vh = tape.v.block(moff[b], h * dh, sm, dh);
      Mat<S> scores = qh * kh.transpose() * scale;  // [sq x sm]
      Mat<S>& probs = tape.probs[static_cast<std::size_t>(b) * heads + h];
      probs.setZero(sq, sm);
      for (long i = 0; i < sq; ++i) {
        const long limit = causal ? std::min<long>(i + 1, sm) : sm;
        S mx = scores(i, 0);
        for (long j = 1; j < limit; ++j) mx = std::max(mx, scores(i, j));
        S sum = 0;
        for (long j = 0; j < limit; ++j) {
          const S e = std::exp(scores(i, j) - mx);
          probs(i, j) = e;
          sum += e;
        }
        for (long j = 0; j < limit; ++j) probs(i, j) /= sum;
      }
      Mat<S> probs_eff = probs;
      if (adrop) {
        Mat<S>& mult = tape.dropmult[static_cast<std::size_t>(b) * heads + h];
        mult.resize(sq, sm);
        const S keep = static_cast<S>(1.0 / (1.0 - attn_dropout));
        for (long i = 0; i < sq; ++i)
          for (long j = 0; j < sm; ++j)
            mult(i, j) = rng->real01() < attn_dropout ? static_cast<S>(0)
                                                      : keep;
        probs_eff = probs.cwiseProduct(mult);
      }
      tape.ctx.block(qoff[b], h * dh, sq, dh) = probs_eff * vh;
    }
  }
  return linear(tape.ctx, P.at(prefix + ".wo"), P.at(prefix + ".bo"));
}

/// Returns d(qin); accumulates d(memory input) into dmem (must be sized).
template <typename S>
Mat<S> attention_backward(const ParamMap<S>& P, const std::string& prefix,
                          const Mat<S>& dout, int heads, bool causal,
                          const AttnTape<S>& tape, ParamMap<S>& G,
                          Mat<S>& dmem) {
  const long D = tape.qin.cols();
  const long dh = D / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const int B = static_cast<int>(tape.qoff.size()) - 1;

  G.at(prefix + ".wo") += tape.ctx.transpose() * dout;
  G.at(prefix + ".bo") += dout.colwise().sum();
  Mat<S> dctx = dout * P.at(prefix + ".wo").transpose();

  Mat<S> dq = Mat<S>::Zero(tape.q.rows(), D);
  Mat<S> dk = Mat<S>::Zero(tape.k.rows(), D);
  Mat<S> dv = Mat<S>::Zero(tape.v.rows(), D);

  for (int b = 0; b < B; ++b) {
    const long sq = tape.qoff[b + 1] - tape.qoff[b];
    const long sm = tape.moff[b + 1] - tape.moff[b];
    if (sq == 0) continue;
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& probs = tape.probs[static_cast<std::size_t>(b) * heads + h];
      auto qh = tape.q.block(tape.qoff[b], h * dh, sq, dh);
      auto kh = tape.k.block(tape.moff[b], h * dh, sm, dh);
      auto vh = tape.v.block(tape.moff[b], h * dh, sm, dh);
      auto dctx_h = dctx.block(tape.qoff[b], h * dh, sq, dh);

      Mat<S> probs_eff = probs;
      if (!tape.dropmult.empty())
        probs_eff = probs.cwiseProduct(
            tape.dropmult[static_cast<std::size_t>(b) * heads + h]);

      Mat<S> dprobs = dctx_h * vh.transpose();  // [sq x sm]
      dv.block(tape.moff[b], h * dh, sm, dh) +=
          probs_eff.transpose() * dctx_h;
      if (!tape.dropmult.empty())
        dprobs = dprobs.cwiseProduct(
            tape.dropmult[static_cast<std::size_t>(b) * heads + h]);

      // Softmax backward; masked columns have probs == 0, so they vanish.
      Mat<S> dscores(sq, sm);
      for (long i = 0; i < sq; ++i) {
        const S dot = dprobs.row(i).cwiseProduct(probs.row(i)).sum();
        dscores.row(i) =
            probs.row(i).cwiseProduct(dprobs.row(i).array().operator-(dot).matrix());
      }
      dq.block(tape.qoff[b], h * dh, sq, dh) += dscores * kh * scale;
      dk.block(tape.moff[b], h * dh, sm, dh) +=
          dscores.transpose() * qh * scale;
    }
  }

  G.at(prefix + ".wq") += tape.qin.transpose() * dq;
  G.at(prefix + ".bq") += dq.colwise().sum();
  G.at(prefix + ".wk") += tape.min_.transpose() * dk;
  G.at(prefix + ".bk") += dk.colwise().sum();
  G.at(prefix + ".wv") += tape.min_.transpose() * dv;
  G.at(prefix + ".bv") += dv.colwise().sum();

  dmem += dk * P.at(prefix + ".wk").transpose();
  dmem += dv * P.at(prefix + ".wv").transpose();
  return dq * P.at(prefix + ".wq").transpose();
}

template <typename S>
Mat<S> ffn_forward(const ParamMap<S>& P, const std::string& prefix,
                   const Mat<S>& xin, FfnTape<S>& tape) {
  tape.xin = xin;
  tape.h1 = linear(xin, P.at(prefix + ".w1"), P.at(prefix + ".b1"));
  tape.act = tape.h1.unaryExpr([](S v) { return gelu(v); });
  return linear(tape.act, P.at(prefix + ".w2"), P.at(prefix + ".b2"));
}

template <typename S>
Mat<S> ffn_backward(const ParamMap<S>& P, const std::string& prefix,
                    const Mat<S>& dout, const FfnTape<S>& tape,
                    ParamMap<S>& G) {
  G.at(prefix + ".w2") += tape.act.transpose() * dout;
  G.at(prefix + ".b2") += dout.colwise().sum();
  Mat<S> dact = dout * P.at(prefix + ".w2").transpose();
  Mat<S> dh1 =
      dact.cwiseProduct(tape.h1.unaryExpr([](S v) { return gelu_grad(v); }));
  G.at(prefix + ".w1") += tape.xin.transpose() * dh1;
  G.at(prefix + ".b1") += dh1.colwise().sum();
  return dh1 * P.at(prefix + ".w1").transpose();
}

Eigen::RowVectorXd positional_row(long pos, long dim) {
  Eigen::RowVectorXd pe(dim);
  for (long i = 0; i < dim; i += 2) {
    const double angle =
        static_cast<double>(pos) /
        std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
    pe(i) = std::sin(angle);
    pe(i + 1) = std::cos(angle);
  }
  return pe;
}

template <typename S>
Pack<S> embed_forward(const ModelConfig& cfg, const Mat<S>& emb,
                      const std::vector<const std::vector<int>*>& seqs,
                      const char* what, std::vector<int>& flat_ids) {
  Pack<S> pack;
  pack.off.push_back(0);
  long total = 0;
  for (const auto* seq : seqs) {
    if (seq->empty()) fail(std::string(what) + ": empty token sequence");
    if (static_cast<long>(seq->size()) > cfg.max_positions)
      fail(std::string(what) + ": sequence length " +
           std::to_string(seq->size()) + " exceeds max_positions " +
           std::to_string(cfg.max_positions));
    total += static_cast<long>(seq->size());
    pack.off.push_back(total);
  }
  const long D = emb.cols();
  const S scale = static_cast<S>(std::sqrt(static_cast<double>(D)));
  pack.x.resize(total, D);
  flat_ids.clear();
  flat_ids.reserve(static_cast<std::size_t>(total));
  long r = 0;
  for (const auto* seq : seqs) {
    for (std::size_t p = 0; p < seq->size(); ++p, ++r) {
      const int id = (*seq)[p];
      if (id < 0 || id >= cfg.vocab_size)
        fail(std::string(what) + ": token id " + std::to_string(id) +
             " out of range [0, " + std::to_string(cfg.vocab_size) + ")");
      flat_ids.push_back(id);
      pack.x.row(r) = emb.row(id) * scale +
                      positional_row(static_cast<long>(p), D).cast<S>();
    }
  }
  return pack;
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

template <typename S>
EncoderTape<S> encoder_forward(const ModelConfig& cfg, const ParamMap<S>& P,
                               int enc_index,
                               const std::vector<const std::vector<int>*>& seqs,
                               Rng* rng) {
  const std::string enc = "enc" + std::to_string(enc_index);
  EncoderTape<S> tape;
  Pack<S> pack = embed_forward(cfg, P.at(enc + ".embed"), seqs,
                               "encoder source", tape.ids);
  make_dropout(tape.embed_drop, pack.x.rows(), pack.x.cols(), cfg.dropout, rng);
  apply_dropout(pack.x, tape.embed_drop);

  tape.layers.resize(static_cast<std::size_t>(cfg.encoder_layers));
  for (int i = 0; i < cfg.encoder_layers; ++i) {
    EncLayerTape<S>& lt = tape.layers[static_cast<std::size_t>(i)];
    const std::string l = enc + ".l" + std::to_string(i);
    Mat<S> xn = ln_forward(pack.x, P.at(l + ".ln1.g"), P.at(l + ".ln1.b"),
                           lt.ln1);
    Mat<S> attn =
        attention_forward(P, l + ".self", xn, pack.off, xn, pack.off,
                          cfg.heads, /*causal=*/false, cfg.attention_dropout,
                          rng, lt.self);
    make_dropout(lt.self_drop, attn.rows(), attn.cols(), cfg.dropout, rng);
    apply_dropout(attn, lt.self_drop);
    pack.x += attn;

    xn = ln_forward(pack.x, P.at(l + ".ln2.g"), P.at(l + ".ln2.b"), lt.ln2);
    Mat<S> ff = ffn_forward(P, l + ".ffn", xn, lt.ffn);
    make_dropout(lt.ffn_drop, ff.rows(), ff.cols(), cfg.dropout, rng);
    apply_dropout(ff, lt.ffn_drop);
    pack.x += ff;
  }

  pack.x = ln_forward(pack.x, P.at(enc + ".ln.g"), P.at(enc + ".ln.b"),
                      tape.ln_final);
  if (cfg.has_encoder_projection()) {
    tape.pre_proj = pack.x;
    pack.x = linear(pack.x, P.at(enc + ".proj.w"), P.at(enc + ".proj.b"));
  }
  tape.memory = std::move(pack);
  return tape;
}

/// Backward through one encoder given d(memory rows).
template <typename S>
void encoder_backward(const ModelConfig& cfg, const ParamMap<S>& P,
                      int enc_index, const EncoderTape<S>& tape,
                      Mat<S> dmem, ParamMap<S>& G) {
  const std::string enc = "enc" + std::to_string(enc_index);
  if (cfg.has_encoder_projection()) {
    G.at(enc + ".proj.w") += tape.pre_proj.transpose() * dmem;
    G.at(enc + ".proj.b") += dmem.colwise().sum();
    dmem = dmem * P.at(enc + ".proj.w").transpose();
  }
  Mat<S> dx = ln_backward(dmem, P.at(enc + ".ln.g"), tape.ln_final,
                          G.at(enc + ".ln.g"), G.at(enc + ".ln.b"));

  for (int i = cfg.encoder_layers - 1; i >= 0; --i) {
    const EncLayerTape<S>& lt = tape.layers[static_cast<std::size_t>(i)];
    const std::string l = enc + ".l" + std::to_string(i);

    Mat<S> dff = dx;
    apply_dropout(dff, lt.ffn_drop);
    Mat<S> dxn = ffn_backward(P, l + ".ffn", dff, lt.ffn, G);
    dx += ln_backward(dxn, P.at(l + ".ln2.g"), lt.ln2, G.at(l + ".ln2.g"),
                      G.at(l + ".ln2.b"));

    Mat<S> dattn = dx;
    apply_dropout(dattn, lt.self_drop);
    Mat<S> dmem_self = Mat<S>::Zero(dx.rows(), dx.cols());
    Mat<S> dq = attention_backward(P, l + ".self", dattn, cfg.heads,
                                   /*causal=*/false, lt.self, G, dmem_self);
    dq += dmem_self;  // self-attention: query and memory are the same rows
    dx += ln_backward(dq, P.at(l + ".ln1.g"), lt.ln1, G.at(l + ".ln1.g"),
                      G.at(l + ".ln1.b"));
  }

  // Embedding scatter.
  const long D = dx.cols();
  const S scale = static_cast<S>(std::sqrt(static_cast<double>(D)));
  apply_dropout(dx, tape.embed_drop);
  Mat<S>& demb = G.at(enc + ".embed");
  for (long r = 0; r < dx.rows(); ++r)
    demb.row(tape.ids[static_cast<std::size_t>(r)]) += dx.row(r) * scale;
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

template <typename S>
struct DecoderResult {
  Pack<S> out;  // final rows, pre output projection
  DecoderTape<S> tape;
};

/// `memories` holds one Pack per encoder (already projected to embed_dim).
template <typename S>
DecoderResult<S> decoder_forward(const ModelConfig& cfg, const ParamMap<S>& P,
                                 const std::vector<Pack<S>>& memories,
                                 const std::vector<const std::vector<int>*>& seqs,
                                 Rng* rng) {
  const bool single = single_cross_layout(cfg);
  const CrossAttentionMode mode = cfg.cross_attention_mode;
  const int K = cfg.num_encoders;

  DecoderResult<S> res;
  DecoderTape<S>& tape = res.tape;
  Pack<S> pack = embed_forward(cfg, P.at("dec.embed"), seqs, "decoder input",
                               tape.ids);
  make_dropout(tape.embed_drop, pack.x.rows(), pack.x.cols(), cfg.dropout, rng);
  apply_dropout(pack.x, tape.embed_drop);

  // Flat mode sees one concatenated memory.
  Pack<S> flat;
  const Pack<S>* cross_mem = nullptr;
  if (single) {
    if (K == 1) {
      cross_mem = &memories[0];
    } else {
      flat.off.push_back(0);
      long total = 0;
      for (int b = 0; b < memories[0].batch(); ++b) {
        for (int k = 0; k < K; ++k) total += memories[static_cast<std::size_t>(k)].len(b);
        flat.off.push_back(total);
      }
      flat.x.resize(total, cfg.embed_dim);
      long r = 0;
      for (int b = 0; b < memories[0].batch(); ++b)
        for (int k = 0; k < K; ++k) {
          const auto& m = memories[static_cast<std::size_t>(k)];
          flat.x.middleRows(r, m.len(b)) = m.block(b);
          r += m.len(b);
        }
      cross_mem = &flat;
    }
  }

  tape.layers.resize(static_cast<std::size_t>(cfg.decoder_layers));
  for (int i = 0; i < cfg.decoder_layers; ++i) {
    DecLayerTape<S>& lt = tape.layers[static_cast<std::size_t>(i)];
    const std::string l = "dec.l" + std::to_string(i);

    Mat<S> xn = ln_forward(pack.x, P.at(l + ".ln1.g"), P.at(l + ".ln1.b"),
                           lt.ln1);
    Mat<S> attn =
        attention_forward(P, l + ".self", xn, pack.off, xn, pack.off,
                          cfg.heads, /*causal=*/true, cfg.attention_dropout,
                          rng, lt.self);
    make_dropout(lt.self_drop, attn.rows(), attn.cols(), cfg.dropout, rng);
    apply_dropout(attn, lt.self_drop);
    pack.x += attn;

    if (single) {
      lt.cross_ln.resize(1);
      lt.cross.resize(1);
      lt.cross_drop.resize(1);
      Mat<S> xc = ln_forward(pack.x, P.at(l + ".ln2.g"), P.at(l + ".ln2.b"),
                             lt.cross_ln[0]);
      Mat<S> out = attention_forward(
          P, l + ".cross", xc, pack.off, cross_mem->x, cross_mem->off,
          cfg.heads, /*causal=*/false, cfg.attention_dropout, rng,
          lt.cross[0]);
      make_dropout(lt.cross_drop[0], out.rows(), out.cols(), cfg.dropout, rng);
      apply_dropout(out, lt.cross_drop[0]);
      pack.x += out;
    } else if (mode == CrossAttentionMode::Serial) {
      lt.cross_ln.resize(static_cast<std::size_t>(K));
      lt.cross.resize(static_cast<std::size_t>(K));
      lt.cross_drop.resize(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k) {
        const std::string lnk = l + ".ln2_" + std::to_string(k);
        Mat<S> xc = ln_forward(pack.x, P.at(lnk + ".g"), P.at(lnk + ".b"),
                               lt.cross_ln[static_cast<std::size_t>(k)]);
        Mat<S> out = attention_forward(
            P, l + ".cross" + std::to_string(k), xc, pack.off,
            memories[static_cast<std::size_t>(k)].x,
            memories[static_cast<std::size_t>(k)].off, cfg.heads,
            /*causal=*/false, cfg.attention_dropout, rng,
            lt.cross[static_cast<std::size_t>(k)]);
        make_dropout(lt.cross_drop[static_cast<std::size_t>(k)], out.rows(),
                     out.cols(), cfg.dropout, rng);
        apply_dropout(out, lt.cross_drop[static_cast<std::size_t>(k)]);
        pack.x += out;
      }
    } else if (mode == CrossAttentionMode::Parallel) {
      lt.cross_ln.resize(1);
      lt.cross.resize(static_cast<std::size_t>(K));
      lt.cross_drop.resize(1);
      Mat<S> xc = ln_forward(pack.x, P.at(l + ".ln2.g"), P.at(l + ".ln2.b"),
                             lt.cross_ln[0]);
      Mat<S> sum = Mat<S>::Zero(pack.x.rows(), pack.x.cols());
      for (int k = 0; k < K; ++k)
        sum += attention_forward(
            P, l + ".cross" + std::to_string(k), xc, pack.off,
            memories[static_cast<std::size_t>(k)].x,
            memories[static_cast<std::size_t>(k)].off, cfg.heads,
            /*causal=*/false, cfg.attention_dropout, rng,
            lt.cross[static_cast<std::size_t>(k)]);
      make_dropout(lt.cross_drop[0], sum.rows(), sum.cols(), cfg.dropout, rng);
      apply_dropout(sum, lt.cross_drop[0]);
      pack.x += sum;
    } else {  // Hierarchical
      lt.cross_ln.resize(1);
      lt.cross.resize(static_cast<std::size_t>(K));
      lt.cross_drop.resize(1);
      HierTape<S>& ht = lt.hier;
      Mat<S> xc = ln_forward(pack.x, P.at(l + ".ln2.g"), P.at(l + ".ln2.b"),
                             lt.cross_ln[0]);
      ht.xn = xc;
      ht.ctx.resize(static_cast<std::size_t>(K));
      ht.key.resize(static_cast<std::size_t>(K));
      ht.val.resize(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k)
        ht.ctx[static_cast<std::size_t>(k)] = attention_forward(
            P, l + ".cross" + std::to_string(k), xc, pack.off,
            memories[static_cast<std::size_t>(k)].x,
            memories[static_cast<std::size_t>(k)].off, cfg.heads,
            /*causal=*/false, cfg.attention_dropout, rng,
            lt.cross[static_cast<std::size_t>(k)]);
      // Second attention block over the per-encoder contexts.
      const std::string hp = l + ".hier";
      ht.q2 = linear(xc, P.at(hp + ".wq"), P.at(hp + ".bq"));
      const long T = pack.x.rows();
      const S iscale =
          static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
      ht.alpha.resize(T, K);
      Mat<S> scores(T, K);
      for (int k = 0; k < K; ++k) {
        ht.key[static_cast<std::size_t>(k)] =
            linear(ht.ctx[static_cast<std::size_t>(k)], P.at(hp + ".wk"),
                   P.at(hp + ".bk"));
        ht.val[static_cast<std::size_t>(k)] =
            linear(ht.ctx[static_cast<std::size_t>(k)], P.at(hp + ".wv"),
                   P.at(hp + ".bv"));
        scores.col(k) =
            (ht.q2.cwiseProduct(ht.key[static_cast<std::size_t>(k)]))
                .rowwise()
                .sum() *
            iscale;
      }
      for (long t = 0; t < T; ++t) {
        const S mx = scores.row(t).maxCoeff();
        S sum = 0;
        for (int k = 0; k < K; ++k) {
          ht.alpha(t, k) = std::exp(scores(t, k) - mx);
          sum += ht.alpha(t, k);
        }
        ht.alpha.row(t) /= sum;
      }
      ht.h = Mat<S>::Zero(T, cfg.embed_dim);
      for (int k = 0; k < K; ++k)
        ht.h += ht.val[static_cast<std::size_t>(k)].array().colwise() *
                ht.alpha.col(k).array();
      Mat<S> out = linear(ht.h, P.at(hp + ".wo"), P.at(hp + ".bo"));
      make_dropout(lt.cross_drop[0], out.rows(), out.cols(), cfg.dropout, rng);
      apply_dropout(out, lt.cross_drop[0]);
      pack.x += out;
    }

    Mat<S> xf = ln_forward(pack.x, P.at(l + ".ln3.g"), P.at(l + ".ln3.b"),
                           lt.ln3);
    Mat<S> ff = ffn_forward(P, l + ".ffn", xf, lt.ffn);
    make_dropout(lt.ffn_drop, ff.rows(), ff.cols(), cfg.dropout, rng);
    apply_dropout(ff, lt.ffn_drop);
    pack.x += ff;
  }

  pack.x = ln_forward(pack.x, P.at("dec.ln.g"), P.at("dec.ln.b"),
                      tape.ln_final);
  tape.final_out = pack.x;
  res.out = std::move(pack);
  return res;
}

/// Backward through the decoder; returns d(memory) per encoder.
template <typename S>
std::vector<Mat<S>> decoder_backward(const ModelConfig& cfg,
                                     const ParamMap<S>& P,
                                     const std::vector<Pack<S>>& memories,
                                     const DecoderTape<S>& tape,
                                     Mat<S> dfinal, ParamMap<S>& G) {
  const bool single = single_cross_layout(cfg);
  const CrossAttentionMode mode = cfg.cross_attention_mode;
  const int K = cfg.num_encoders;
  const int B = memories[0].batch();

  std::vector<Mat<S>> dmem(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k)
    dmem[static_cast<std::size_t>(k)] =
        Mat<S>::Zero(memories[static_cast<std::size_t>(k)].x.rows(),
                     cfg.embed_dim);
  // Flat mode accumulates into the concatenated memory, split afterwards.
  Mat<S> dflat;
  long flat_rows = 0;
  std::vector<long> flat_off{0};
  if (single && K > 1) {
    for (int b = 0; b < B; ++b) {
      for (int k = 0; k < K; ++k)
        flat_rows += memories[static_cast<std::size_t>(k)].len(b);
      flat_off.push_back(flat_rows);
    }
    dflat = Mat<S>::Zero(flat_rows, cfg.embed_dim);
  }

  Mat<S> dx = ln_backward(dfinal, P.at("dec.ln.g"), tape.ln_final,
                          G.at("dec.ln.g"), G.at("dec.ln.b"));

  for (int i = cfg.decoder_layers - 1; i >= 0; --i) {
    const DecLayerTape<S>& lt = tape.layers[static_cast<std::size_t>(i)];
    const std::string l = "dec.l" + std::to_string(i);

    Mat<S> dff = dx;
    apply_dropout(dff, lt.ffn_drop);
    Mat<S> dxf = ffn_backward(P, l + ".ffn", dff, lt.ffn, G);
    dx += ln_backward(dxf, P.at(l + ".ln3.g"), lt.ln3, G.at(l + ".ln3.g"),
                      G.at(l + ".ln3.b"));

    if (single) {
      Mat<S> dout = dx;
      apply_dropout(dout, lt.cross_drop[0]);
      Mat<S>& dm = (K == 1) ? dmem[0] : dflat;
      Mat<S> dxc = attention_backward(P, l + ".cross", dout, cfg.heads,
                                      /*causal=*/false, lt.cross[0], G, dm);
      dx += ln_backward(dxc, P.at(l + ".ln2.g"), lt.cross_ln[0],
                        G.at(l + ".ln2.g"), G.at(l + ".ln2.b"));
    } else if (mode == CrossAttentionMode::Serial) {
      for (int k = K - 1; k >= 0; --k) {
        const std::string lnk = l + ".ln2_" + std::to_string(k);
        Mat<S> dout = dx;
        apply_dropout(dout, lt.cross_drop[static_cast<std::size_t>(k)]);
        Mat<S> dxc = attention_backward(
            P, l + ".cross" + std::to_string(k), dout, cfg.heads,
            /*causal=*/false, lt.cross[static_cast<std::size_t>(k)], G,
            dmem[static_cast<std::size_t>(k)]);
        dx += ln_backward(dxc, P.at(lnk + ".g"),
                          lt.cross_ln[static_cast<std::size_t>(k)],
                          G.at(lnk + ".g"), G.at(lnk + ".b"));
      }
    } else if (mode == CrossAttentionMode::Parallel) {
      Mat<S> dsum = dx;
      apply_dropout(dsum, lt.cross_drop[0]);
      Mat<S> dxc = Mat<S>::Zero(dx.rows(), dx.cols());
      for (int k = 0; k < K; ++k)
        dxc += attention_backward(
            P, l + ".cross" + std::to_string(k), dsum, cfg.heads,
            /*causal=*/false, lt.cross[static_cast<std::size_t>(k)], G,
            dmem[static_cast<std::size_t>(k)]);
      dx += ln_backward(dxc, P.at(l + ".ln2.g"), lt.cross_ln[0],
                        G.at(l + ".ln2.g"), G.at(l + ".ln2.b"));
    } else {  // Hierarchical
      const HierTape<S>& ht = lt.hier;
      const std::string hp = l + ".hier";
      const long T = dx.rows();
      const S iscale =
          static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));

      Mat<S> dout = dx;
      apply_dropout(dout, lt.cross_drop[0]);
      G.at(hp + ".wo") += ht.h.transpose() * dout;
      G.at(hp + ".bo") += dout.colwise().sum();
      Mat<S> dh = dout * P.at(hp + ".wo").transpose();

      Mat<S> dalpha(T, K);
      std::vector<Mat<S>> dval(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k) {
        dalpha.col(k) =
            dh.cwiseProduct(ht.val[static_cast<std::size_t>(k)])
                .rowwise()
                .sum();
        dval[static_cast<std::size_t>(k)] =
            dh.array().colwise() * ht.alpha.col(k).array();
      }
      Mat<S> dscores(T, K);
      for (long t = 0; t < T; ++t) {
        const S dot = dalpha.row(t).cwiseProduct(ht.alpha.row(t)).sum();
        dscores.row(t) = ht.alpha.row(t).cwiseProduct(
            dalpha.row(t).array().operator-(dot).matrix());
      }
      Mat<S> dq2 = Mat<S>::Zero(T, cfg.embed_dim);
      Mat<S> dxc = Mat<S>::Zero(T, cfg.embed_dim);
      for (int k = 0; k < K; ++k) {
        Mat<S> dkey = ht.q2.array().colwise() * dscores.col(k).array();
        dkey *= iscale;
        dq2 += (ht.key[static_cast<std::size_t>(k)].array().colwise() *
                dscores.col(k).array())
                   .matrix() *
               iscale;
        // Through the key/value projections into the per-encoder context.
        Mat<S> dctx =
            dkey * P.at(hp + ".wk").transpose() +
            dval[static_cast<std::size_t>(k)] * P.at(hp + ".wv").transpose();
        G.at(hp + ".wk") +=
            ht.ctx[static_cast<std::size_t>(k)].transpose() * dkey;
        G.at(hp + ".bk") += dkey.colwise().sum();
        G.at(hp + ".wv") += ht.ctx[static_cast<std::size_t>(k)].transpose() *
                            dval[static_cast<std::size_t>(k)];
        G.at(hp + ".bv") += dval[static_cast<std::size_t>(k)].colwise().sum();
        dxc += attention_backward(
            P, l + ".cross" + std::to_string(k), dctx, cfg.heads,
            /*causal=*/false, lt.cross[static_cast<std::size_t>(k)], G,
            dmem[static_cast<std::size_t>(k)]);
      }
      G.at(hp + ".wq") += ht.xn.transpose() * dq2;
      G.at(hp + ".bq") += dq2.colwise().sum();
      dxc += dq2 * P.at(hp + ".wq").transpose();
      dx += ln_backward(dxc, P.at(l + ".ln2.g"), lt.cross_ln[0],
                        G.at(l + ".ln2.g"), G.at(l + ".ln2.b"));
    }

    Mat<S> dattn = dx;
    apply_dropout(dattn, lt.self_drop);
    Mat<S> dmem_self = Mat<S>::Zero(dx.rows(), dx.cols());
    Mat<S> dq = attention_backward(P, l + ".self", dattn, cfg.heads,
                                   /*causal=*/true, lt.self, G, dmem_self);
    dq += dmem_self;
    dx += ln_backward(dq, P.at(l + ".ln1.g"), lt.ln1, G.at(l + ".ln1.g"),
                      G.at(l + ".ln1.b"));
  }

  const S scale =
      static_cast<S>(std::sqrt(static_cast<double>(cfg.embed_dim)));
  apply_dropout(dx, tape.embed_drop);
  Mat<S>& demb = G.at("dec.embed");
  for (long r = 0; r < dx.rows(); ++r)
    demb.row(tape.ids[static_cast<std::size_t>(r)]) += dx.row(r) * scale;

  // Split the flat-mode memory gradient back per encoder.
  if (single && K > 1) {
    long r = 0;
    for (int b = 0; b < B; ++b)
      for (int k = 0; k < K; ++k) {
        const auto& m = memories[static_cast<std::size_t>(k)];
        dmem[static_cast<std::size_t>(k)].middleRows(m.off[b], m.len(b)) +=
            dflat.middleRows(r, m.len(b));
        r += m.len(b);
      }
  }
  return dmem;
}

template <typename S>
std::vector<Pack<S>> run_encoders(
    const ModelConfig& cfg, const ParamMap<S>& P,
    const std::vector<std::vector<const std::vector<int>*>>& enc_seqs,
    Rng* rng, std::vector<EncoderTape<S>>* tapes) {
  std::vector<Pack<S>> memories;
  for (int k = 0; k < cfg.num_encoders; ++k) {
    EncoderTape<S> tape = encoder_forward(
        cfg, P, k, enc_seqs[static_cast<std::size_t>(k)], rng);
    memories.push_back(tape.memory);
    if (tapes) tapes->push_back(std::move(tape));
  }
  return memories;
}

template <typename S>
void check_sources(const ModelConfig& cfg,
                   const std::vector<std::vector<int>>& sources) {
  if (static_cast<int>(sources.size()) != cfg.num_encoders)
    fail("forward: got " + std::to_string(sources.size()) +
         " source sequences for " + std::to_string(cfg.num_encoders) +
         " encoders");
}

}  // namespace

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

template <typename S>
Mat<S> forward(const ModelConfig& cfg, const ParamMap<S>& P,
               const std::vector<std::vector<int>>& sources,
               const std::vector<int>& target_prefix) {
  cfg.validate();
  check_sources<S>(cfg, sources);
  if (target_prefix.empty()) fail("forward: empty target prefix");

  std::vector<std::vector<const std::vector<int>*>> enc_seqs(
      static_cast<std::size_t>(cfg.num_encoders));
  for (int k = 0; k < cfg.num_encoders; ++k)
    enc_seqs[static_cast<std::size_t>(k)] = {
        &sources[static_cast<std::size_t>(k)]};
  std::vector<Pack<S>> memories =
      run_encoders<S>(cfg, P, enc_seqs, nullptr, nullptr);
  DecoderResult<S> dec =
      decoder_forward<S>(cfg, P, memories, {&target_prefix}, nullptr);

  Mat<S> logits = dec.out.x * P.at("dec.out.w");
  logits.rowwise() += P.at("dec.out.b").row(0);
  // Log-softmax per row.
  for (long r = 0; r < logits.rows(); ++r) {
    const S mx = logits.row(r).maxCoeff();
    const S lse =
        std::log((logits.row(r).array() - mx).exp().sum()) + mx;
    logits.row(r).array() -= lse;
  }
  return logits;
}

template <typename S>
Mat<S> encode_memory(const ModelConfig& cfg, const ParamMap<S>& P,
                     const std::vector<int>& source, int encoder_index) {
  cfg.validate();
  if (encoder_index < 0 || encoder_index >= cfg.num_encoders)
    fail("encode_memory: encoder index out of range");
  EncoderTape<S> tape =
      encoder_forward<S>(cfg, P, encoder_index, {&source}, nullptr);
  return tape.memory.x;
}

namespace {

template <typename S>
struct LossWork {
  double loss = 0.0;
  long long positions = 0;
  Mat<S> dlogits;  // empty when gradients are not needed
};

/// Label-smoothed NLL over packed decoder rows. Rows whose gold id is PAD
/// contribute neither loss nor gradient. The smoothing distribution is
/// uniform over the non-PAD vocabulary.
template <typename S>
LossWork<S> loss_from_logits(Mat<S>& logits, const std::vector<int>& gold,
                             double eps, bool want_grad) {
  const long R = logits.rows();
  const long V = logits.cols();
  LossWork<S> work;
  if (want_grad) work.dlogits = Mat<S>::Zero(R, V);

  const double uni = eps / static_cast<double>(V - 1);
  for (long r = 0; r < R; ++r) {
    const int y = gold[static_cast<std::size_t>(r)];
    if (y == 0) continue;  // PAD
    ++work.positions;
  }
  if (work.positions == 0) fail("loss: no non-PAD target positions");
  const double inv_n = 1.0 / static_cast<double>(work.positions);

  for (long r = 0; r < R; ++r) {
    const int y = gold[static_cast<std::size_t>(r)];
    if (y == 0) continue;
    const S mx = logits.row(r).maxCoeff();
    double sum = 0.0;
    for (long v = 0; v < V; ++v)
      sum += std::exp(static_cast<double>(logits(r, v) - mx));
    const double lse = std::log(sum) + static_cast<double>(mx);

    double row_loss = -(1.0 - eps) * (static_cast<double>(logits(r, y)) - lse);
    if (eps > 0.0) {
      double acc = 0.0;
      for (long v = 1; v < V; ++v)  // non-PAD vocabulary
        acc += static_cast<double>(logits(r, v)) - lse;
      row_loss -= uni * acc;
    }
    work.loss += row_loss * inv_n;

    if (want_grad) {
      for (long v = 0; v < V; ++v) {
        const double p =
            std::exp(static_cast<double>(logits(r, v)) - lse);
        double q = 0.0;
        if (v != 0) q = uni;
        if (v == y) q += 1.0 - eps;
        work.dlogits(r, v) = static_cast<S>((p - q) * inv_n);
      }
    }
  }
  return work;
}

}  // namespace

template <typename S>
LossGrad<S> backward(const ModelConfig& cfg, const ParamMap<S>& P,
                     const std::vector<const TrainExample*>& batch,
                     double label_smoothing, Rng* dropout_rng) {
  cfg.validate();
  if (batch.empty()) fail("backward: empty batch");
  for (const TrainExample* ex : batch) check_sources<S>(cfg, ex->sources);

  std::vector<std::vector<const std::vector<int>*>> enc_seqs(
      static_cast<std::size_t>(cfg.num_encoders));
  for (const TrainExample* ex : batch)
    for (int k = 0; k < cfg.num_encoders; ++k)
      enc_seqs[static_cast<std::size_t>(k)].push_back(
          &ex->sources[static_cast<std::size_t>(k)]);

  // Decoder input [BOS, y...]; gold [y..., EOS].
  std::vector<std::vector<int>> dec_in(batch.size());
  std::vector<int> gold;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    dec_in[b].push_back(SubwordModel::kBos);
    dec_in[b].insert(dec_in[b].end(), batch[b]->target.begin(),
                     batch[b]->target.end());
    for (int t : batch[b]->target) gold.push_back(t);
    gold.push_back(SubwordModel::kEos);
  }
  std::vector<const std::vector<int>*> dec_ptrs;
  for (auto& s : dec_in) dec_ptrs.push_back(&s);

  std::vector<EncoderTape<S>> enc_tapes;
  std::vector<Pack<S>> memories =
      run_encoders<S>(cfg, P, enc_seqs, dropout_rng, &enc_tapes);
  DecoderResult<S> dec =
      decoder_forward<S>(cfg, P, memories, dec_ptrs, dropout_rng);

  Mat<S> logits = dec.out.x * P.at("dec.out.w");
  logits.rowwise() += P.at("dec.out.b").row(0);
  LossWork<S> work =
      loss_from_logits<S>(logits, gold, label_smoothing, /*want_grad=*/true);
  if (!std::isfinite(work.loss)) fail("backward: non-finite loss");

  LossGrad<S> result;
  result.loss = work.loss;
  result.target_positions = work.positions;
  result.grads = zeros_like(P);
  ParamMap<S>& G = result.grads;

  G.at("dec.out.w") += dec.out.x.transpose() * work.dlogits;
  G.at("dec.out.b") += work.dlogits.colwise().sum();
  Mat<S> dfinal = work.dlogits * P.at("dec.out.w").transpose();

  std::vector<Mat<S>> dmem =
      decoder_backward<S>(cfg, P, memories, dec.tape, std::move(dfinal), G);
  for (int k = 0; k < cfg.num_encoders; ++k)
    encoder_backward<S>(cfg, P, k, enc_tapes[static_cast<std::size_t>(k)],
                        std::move(dmem[static_cast<std::size_t>(k)]), G);

  for (const auto& [name, m] : G.tensors)
    if (!m.allFinite())
      fail("backward: non-finite gradient in tensor " + name);
  return result;
}

template <typename S>
double evaluate_loss(const ModelConfig& cfg, const ParamMap<S>& P,
                     const std::vector<const TrainExample*>& batch,
                     double label_smoothing) {
  cfg.validate();
  if (batch.empty()) fail("evaluate_loss: empty batch");
  for (const TrainExample* ex : batch) check_sources<S>(cfg, ex->sources);

  std::vector<std::vector<const std::vector<int>*>> enc_seqs(
      static_cast<std::size_t>(cfg.num_encoders));
  for (const TrainExample* ex : batch)
    for (int k = 0; k < cfg.num_encoders; ++k)
      enc_seqs[static_cast<std::size_t>(k)].push_back(
          &ex->sources[static_cast<std::size_t>(k)]);

  std::vector<std::vector<int>> dec_in(batch.size());
  std::vector<int> gold;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    dec_in[b].push_back(SubwordModel::kBos);
    dec_in[b].insert(dec_in[b].end(), batch[b]->target.begin(),
                     batch[b]->target.end());
    for (int t : batch[b]->target) gold.push_back(t);
    gold.push_back(SubwordModel::kEos);
  }
  std::vector<const std::vector<int>*> dec_ptrs;
  for (auto& s : dec_in) dec_ptrs.push_back(&s);

  std::vector<Pack<S>> memories =
      run_encoders<S>(cfg, P, enc_seqs, nullptr, nullptr);
  DecoderResult<S> dec =
      decoder_forward<S>(cfg, P, memories, dec_ptrs, nullptr);
  Mat<S> logits = dec.out.x * P.at("dec.out.w");
  logits.rowwise() += P.at("dec.out.b").row(0);
  LossWork<S> work =
      loss_from_logits<S>(logits, gold, label_smoothing, /*want_grad=*/false);
  return work.loss;
}

template <typename S>
std::vector<long> cross_attention_widths(
    const ModelConfig& cfg, const ParamMap<S>& P,
    const std::vector<std::vector<int>>& sources,
    const std::vector<int>& target_prefix) {
  cfg.validate();
  check_sources<S>(cfg, sources);
  std::vector<std::vector<const std::vector<int>*>> enc_seqs(
      static_cast<std::size_t>(cfg.num_encoders));
  for (int k = 0; k < cfg.num_encoders; ++k)
    enc_seqs[static_cast<std::size_t>(k)] = {
        &sources[static_cast<std::size_t>(k)]};
  std::vector<Pack<S>> memories =
      run_encoders<S>(cfg, P, enc_seqs, nullptr, nullptr);
  DecoderResult<S> dec =
      decoder_forward<S>(cfg, P, memories, {&target_prefix}, nullptr);

  std::vector<long> widths;
  for (const auto& layer : dec.tape.layers) {
    long w = 0;
    for (const auto& attn : layer.cross) w += attn.probs.at(0).cols();
    widths.push_back(w);
  }
  return widths;
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

template <typename S>
DecodeSession<S>::DecodeSession(const ModelConfig& config,
                                const ParamMap<S>& params,
                                const std::vector<std::vector<int>>& sources)
    : config_(&config), params_(&params) {
  config.validate();
  check_sources<S>(config, sources);
  const int K = config.num_encoders;
  for (int k = 0; k < K; ++k) {
    EncoderTape<S> tape = encoder_forward<S>(
        config, params, k, {&sources[static_cast<std::size_t>(k)]}, nullptr);
    memories_.push_back(std::move(tape.memory.x));
  }

  const bool single = single_cross_layout(config);
  Mat<S> flat;
  if (single && K > 1) {
    long rows = 0;
    for (const auto& m : memories_) rows += m.rows();
    flat.resize(rows, config.embed_dim);
    long r = 0;
    for (const auto& m : memories_) {
      flat.middleRows(r, m.rows()) = m;
      r += m.rows();
    }
  }

  cross_k_.resize(static_cast<std::size_t>(config.decoder_layers));
  cross_v_.resize(static_cast<std::size_t>(config.decoder_layers));
  for (int i = 0; i < config.decoder_layers; ++i) {
    const std::string l = "dec.l" + std::to_string(i);
    if (single) {
      const Mat<S>& mem = (K == 1) ? memories_[0] : flat;
      cross_k_[static_cast<std::size_t>(i)].push_back(
          linear(mem, params.at(l + ".cross.wk"), params.at(l + ".cross.bk")));
      cross_v_[static_cast<std::size_t>(i)].push_back(
          linear(mem, params.at(l + ".cross.wv"), params.at(l + ".cross.bv")));
    } else {
      for (int k = 0; k < K; ++k) {
        const std::string cp = l + ".cross" + std::to_string(k);
        cross_k_[static_cast<std::size_t>(i)].push_back(
            linear(memories_[static_cast<std::size_t>(k)],
                   params.at(cp + ".wk"), params.at(cp + ".bk")));
        cross_v_[static_cast<std::size_t>(i)].push_back(
            linear(memories_[static_cast<std::size_t>(k)],
                   params.at(cp + ".wv"), params.at(cp + ".bv")));
      }
    }
  }
}

template <typename S>
typename DecodeSession<S>::State DecodeSession<S>::make_state() const {
  State state;
  state.self_k.resize(static_cast<std::size_t>(config_->decoder_layers));
  state.self_v.resize(static_cast<std::size_t>(config_->decoder_layers));
  for (auto& m : state.self_k) m.resize(0, config_->embed_dim);
  for (auto& m : state.self_v) m.resize(0, config_->embed_dim);
  return state;
}

namespace {

// Row-vector layer norm reusing the packed implementation.
template <typename S>
Mat<S> ln_row(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b) {
  LNTape<S> tape;
  return ln_forward(x, g, b, tape);
}

// Single-query multi-head attention against a cached K/V matrix.
template <typename S>
Mat<S> attend_row(const ParamMap<S>& P, const std::string& prefix,
                  const Mat<S>& xq, const Mat<S>& kc, const Mat<S>& vc,
                  int heads) {
  const long D = xq.cols();
  const long dh = D / heads;
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  Mat<S> q = linear(xq, P.at(prefix + ".wq"), P.at(prefix + ".bq"));
  Mat<S> ctx(1, D);
  const long sm = kc.rows();
  for (int h = 0; h < heads; ++h) {
    auto qh = q.block(0, h * dh, 1, dh);
    auto kh = kc.block(0, h * dh, sm, dh);
    auto vh = vc.block(0, h * dh, sm, dh);
    Eigen::Matrix<S, 1, Eigen::Dynamic> scores =
        (qh * kh.transpose()) * scale;
    const S mx = scores.maxCoeff();
    Eigen::Matrix<S, 1, Eigen::Dynamic> probs =
        (scores.array() - mx).exp();
    probs /= probs.sum();
    ctx.block(0, h * dh, 1, dh) = probs * vh;
  }
  return linear(ctx, P.at(prefix + ".wo"), P.at(prefix + ".bo"));
}

}  // namespace

template <typename S>
std::vector<double> DecodeSession<S>::step(State& state, int token) const {
  const ModelConfig& cfg = *config_;
  const ParamMap<S>& P = *params_;
  const int K = cfg.num_encoders;
  const bool single = single_cross_layout(cfg);
  if (token < 0 || token >= cfg.vocab_size)
    fail("decode step: token id out of range");
  if (state.len >= cfg.max_positions)
    fail("decode step: exceeded max_positions");

  const long E = cfg.embed_dim;
  const S scale = static_cast<S>(std::sqrt(static_cast<double>(E)));
  Mat<S> x(1, E);
  x.row(0) = P.at("dec.embed").row(token) * scale +
             positional_row(state.len, E).cast<S>();

  for (int i = 0; i < cfg.decoder_layers; ++i) {
    const std::string l = "dec.l" + std::to_string(i);
    Mat<S> xn = ln_row(x, P.at(l + ".ln1.g"), P.at(l + ".ln1.b"));
    // Append this position's self K/V, then attend over the whole cache.
    Mat<S>& kc = state.self_k[static_cast<std::size_t>(i)];
    Mat<S>& vc = state.self_v[static_cast<std::size_t>(i)];
    kc.conservativeResize(kc.rows() + 1, E);
    vc.conservativeResize(vc.rows() + 1, E);
    kc.row(kc.rows() - 1) =
        linear(xn, P.at(l + ".self.wk"), P.at(l + ".self.bk")).row(0);
    vc.row(vc.rows() - 1) =
        linear(xn, P.at(l + ".self.wv"), P.at(l + ".self.bv")).row(0);
    {
      const long dh = E / cfg.heads;
      const S ascale =
          static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
      Mat<S> q = linear(xn, P.at(l + ".self.wq"), P.at(l + ".self.bq"));
      Mat<S> ctx(1, E);
      for (int h = 0; h < cfg.heads; ++h) {
        auto qh = q.block(0, h * dh, 1, dh);
        auto kh = kc.block(0, h * dh, kc.rows(), dh);
        auto vh = vc.block(0, h * dh, vc.rows(), dh);
        Eigen::Matrix<S, 1, Eigen::Dynamic> scores =
            (qh * kh.transpose()) * ascale;
        const S mx = scores.maxCoeff();
        Eigen::Matrix<S, 1, Eigen::Dynamic> probs =
            (scores.array() - mx).exp();
        probs /= probs.sum();
        ctx.block(0, h * dh, 1, dh) = probs * vh;
      }
      x += linear(ctx, P.at(l + ".self.wo"), P.at(l + ".self.bo"));
    }

    const auto& kcs = cross_k_[static_cast<std::size_t>(i)];
    const auto& vcs = cross_v_[static_cast<std::size_t>(i)];
    if (single) {
      Mat<S> xc = ln_row(x, P.at(l + ".ln2.g"), P.at(l + ".ln2.b"));
      Mat<S> q = linear(xc, P.at(l + ".cross.wq"), P.at(l + ".cross.bq"));
      const long dh = E / cfg.heads;
      const S ascale =
          static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
      Mat<S> ctx(1, E);
      const long sm = kcs[0].rows();
      for (int h = 0; h < cfg.heads; ++h) {
        auto qh = q.block(0, h * dh, 1, dh);
        auto kh = kcs[0].block(0, h * dh, sm, dh);
        auto vh = vcs[0].block(0, h * dh, sm, dh);
        Eigen::Matrix<S, 1, Eigen::Dynamic> scores =
            (qh * kh.transpose()) * ascale;
        const S mx = scores.maxCoeff();
        Eigen::Matrix<S, 1, Eigen::Dynamic> probs =
            (scores.array() - mx).exp();
        probs /= probs.sum();
        ctx.block(0, h * dh, 1, dh) = probs * vh;
      }
      x += linear(ctx, P.at(l + ".cross.wo"), P.at(l + ".cross.bo"));
    } else if (cfg.cross_attention_mode == CrossAttentionMode::Serial) {
      for (int k = 0; k < K; ++k) {
        const std::string lnk = l + ".ln2_" + std::to_string(k);
        Mat<S> xc = ln_row(x, P.at(lnk + ".g"), P.at(lnk + ".b"));
        x += cross_attend_cached(P, l + ".cross" + std::to_string(k), xc,
                                 kcs[static_cast<std::size_t>(k)],
                                 vcs[static_cast<std::size_t>(k)], cfg.heads);
      }
    } else if (cfg.cross_attention_mode == CrossAttentionMode::Parallel) {
      Mat<S> xc = ln_row(x, P.at(l + ".ln2.g"), P.at(l + ".ln2.b"));
      Mat<S> sum = Mat<S>::Zero(1, E);
      for (int k = 0; k < K; ++k)
        sum += cross_attend_cached(P, l + ".cross" + std::to_string(k), xc,
                                   kcs[static_cast<std::size_t>(k)],
                                   vcs[static_cast<std::size_t>(k)],
                                   cfg.heads);
      x += sum;
    } else {  // Hierarchical
      const std::string hp = l + ".hier";
      Mat<S> xc = ln_row(x, P.at(l + ".ln2.g"), P.at(l + ".ln2.b"));
      std::vector<Mat<S>> ctxs;
      for (int k = 0; k < K; ++k)
        ctxs.push_back(cross_attend_cached(
            P, l + ".cross" + std::to_string(k), xc,
            kcs[static_cast<std::size_t>(k)],
            vcs[static_cast<std::size_t>(k)], cfg.heads));
      Mat<S> q2 = linear(xc, P.at(hp + ".wq"), P.at(hp + ".bq"));
      const S iscale =
          static_cast<S>(1.0 / std::sqrt(static_cast<double>(E)));
      Eigen::Matrix<S, 1, Eigen::Dynamic> scores(K);
      std::vector<Mat<S>> vals;
      for (int k = 0; k < K; ++k) {
        Mat<S> key = linear(ctxs[static_cast<std::size_t>(k)],
                            P.at(hp + ".wk"), P.at(hp + ".bk"));
        vals.push_back(linear(ctxs[static_cast<std::size_t>(k)],
                              P.at(hp + ".wv"), P.at(hp + ".bv")));
        scores(k) = q2.row(0).dot(key.row(0)) * iscale;
      }
      const S mx = scores.maxCoeff();
      Eigen::Matrix<S, 1, Eigen::Dynamic> alpha =
          (scores.array() - mx).exp();
      alpha /= alpha.sum();
      Mat<S> h = Mat<S>::Zero(1, E);
      for (int k = 0; k < K; ++k)
        h += vals[static_cast<std::size_t>(k)] * alpha(k);
      x += linear(h, P.at(hp + ".wo"), P.at(hp + ".bo"));
    }

    Mat<S> xf = ln_row(x, P.at(l + ".ln3.g"), P.at(l + ".ln3.b"));
    FfnTape<S> ft;
    x += ffn_forward(P, l + ".ffn", xf, ft);
  }

  Mat<S> xn = ln_row(x, P.at("dec.ln.g"), P.at("dec.ln.b"));
  Mat<S> logits = linear(xn, P.at("dec.out.w"), P.at("dec.out.b"));
  const S mx = logits.row(0).maxCoeff();
  double sum = 0.0;
  for (long v = 0; v < logits.cols(); ++v)
    sum += std::exp(static_cast<double>(logits(0, v) - mx));
  const double lse = std::log(sum) + static_cast<double>(mx);
  std::vector<double> logp(static_cast<std::size_t>(logits.cols()));
  for (long v = 0; v < logits.cols(); ++v)
    logp[static_cast<std::size_t>(v)] =
        static_cast<double>(logits(0, v)) - lse;

  state.len += 1;
  return logp;
}

// Explicit instantiations.
template Mat<float> forward<float>(const ModelConfig&, const ParamMap<float>&,
                                   const std::vector<std::vector<int>>&,
                                   const std::vector<int>&);
template Mat<double> forward<double>(const ModelConfig&,
                                     const ParamMap<double>&,
                                     const std::vector<std::vector<int>>&,
                                     const std::vector<int>&);
template Mat<float> encode_memory<float>(const ModelConfig&,
                                         const ParamMap<float>&,
                                         const std::vector<int>&, int);
template Mat<double> encode_memory<double>(const ModelConfig&,
                                           const ParamMap<double>&,
                                           const std::vector<int>&, int);
template LossGrad<float> backward<float>(const ModelConfig&,
                                         const ParamMap<float>&,
                                         const std::vector<const TrainExample*>&,
                                         double, Rng*);
template LossGrad<double> backward<double>(
    const ModelConfig&, const ParamMap<double>&,
    const std::vector<const TrainExample*>&, double, Rng*);
template double evaluate_loss<float>(const ModelConfig&,
                                     const ParamMap<float>&,
                                     const std::vector<const TrainExample*>&,
                                     double);
template double evaluate_loss<double>(const ModelConfig&,
                                      const ParamMap<double>&,
                                      const std::vector<const TrainExample*>&,
                                      double);
template std::vector<long> cross_attention_widths<float>(
    const ModelConfig&, const ParamMap<float>&,
    const std::vector<std::vector<int>>&, const std::vector<int>&);
template std::vector<long> cross_attention_widths<double>(
    const ModelConfig&, const ParamMap<double>&,
    const std::vector<std::vector<int>>&, const std::vector<int>&);
template class DecodeSession<float>;
template class DecodeSession<double>;

}  // namespace sigmt
