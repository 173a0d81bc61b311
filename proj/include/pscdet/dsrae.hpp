#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pscdet/error.hpp"
#include "pscdet/layers.hpp"
#include "pscdet/rng.hpp"
#include "pscdet/schema.hpp"
#include "pscdet/tensor.hpp"

namespace pscdet {

enum class ModelMode { dsr, rsr };

inline const char* mode_name(ModelMode m) {
  return m == ModelMode::dsr ? "dsr" : "rsr";
}

inline ModelMode mode_from_name(const std::string& s) {
  if (s == "dsr") return ModelMode::dsr;
  if (s == "rsr") return ModelMode::rsr;
  throw DataError("unknown mode '" + s + "' (expected dsr or rsr)");
}

struct Architecture {
  std::vector<std::size_t> conv_channels{8, 16};
  std::size_t latent_dim = 32;   // D
  std::size_t dsr_dim = 8;       // d
  std::size_t decoder_hidden = 0;  // 0 = conv flatten size
  double dropout_rate = 0.1;       // contrastive-view dropout

  std::size_t flatten_size() const {
    return conv_channels.empty() ? 0 : conv_channels.back() * kNumAttributes;
  }
  std::size_t hidden_size() const {
    return decoder_hidden ? decoder_hidden : flatten_size();
  }

  void validate() const {
    if (conv_channels.empty())
      throw DataError("architecture: need at least one conv stage");
    for (std::size_t c : conv_channels) {
      if (c == 0) throw DataError("architecture: conv channels must be positive");
    }
    if (latent_dim == 0 || dsr_dim == 0)
      throw DataError("architecture: dims must be positive");
    if (dsr_dim >= latent_dim)
      throw DataError("architecture: dsr_dim must be < latent_dim");
    if (latent_dim >= flatten_size())
      throw DataError("architecture: latent_dim must be < conv flatten size");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw DataError("architecture: dropout_rate must be in [0,1)");
  }

  bool operator==(const Architecture&) const = default;
};

struct Hyper {
  double p = 1.0;
  double q = 1.0;
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  double lambda3 = 0.5;
  double tau = 0.05;

  void validate() const {
    if (!(p > 0.0)) throw DataError("hyper: p must be > 0");
    if (!(q > 0.0)) throw DataError("hyper: q must be > 0");
    if (!(lambda1 > 0.0)) throw DataError("hyper: lambda1 must be > 0");
    if (!(lambda2 > 0.0)) throw DataError("hyper: lambda2 must be > 0");
    if (!(lambda3 >= 0.0)) throw DataError("hyper: lambda3 must be >= 0");
    if (!(tau > 0.0)) throw DataError("hyper: tau must be > 0");
  }

  bool operator==(const Hyper&) const = default;
};

struct DecoderParams {
  Tensor w0, b0;  // d -> D
  Tensor w1, b1;  // D -> hidden
  Tensor w2, b2;  // hidden -> 14
};

struct ModelParams {
  Architecture arch;
  Hyper hyper;
  ModelMode mode = ModelMode::dsr;
  std::vector<Tensor> conv_kernels;  // per stage (C_out,C_in,2,3)
  std::vector<Tensor> conv_biases;   // per stage (C_out)
  Tensor enc_w, enc_b;               // flatten -> D
  Tensor a_reg;                      // (d,D)
  Tensor a_det;                      // (d,D), empty in rsr mode
  DecoderParams dec_reg, dec_det;    // dec_det empty in rsr mode
  NormStats norm;                    // fitted on the training split
};

struct ParamBlock {
  std::string name;
  Tensor* tensor;
};
struct ConstParamBlock {
  std::string name;
  const Tensor* tensor;
};

// Trainable blocks in checkpoint-manifest order.
inline std::vector<ParamBlock> param_blocks(ModelParams& p) {
  std::vector<ParamBlock> blocks;
  for (std::size_t s = 0; s < p.conv_kernels.size(); ++s) {
    blocks.push_back({"conv" + std::to_string(s) + "_kernel", &p.conv_kernels[s]});
    blocks.push_back({"conv" + std::to_string(s) + "_bias", &p.conv_biases[s]});
  }
  blocks.push_back({"enc_w", &p.enc_w});
  blocks.push_back({"enc_b", &p.enc_b});
  auto decoder = [&blocks](const char* prefix, DecoderParams& d) {
    blocks.push_back({std::string(prefix) + "_w0", &d.w0});
    blocks.push_back({std::string(prefix) + "_b0", &d.b0});
    blocks.push_back({std::string(prefix) + "_w1", &d.w1});
    blocks.push_back({std::string(prefix) + "_b1", &d.b1});
    blocks.push_back({std::string(prefix) + "_w2", &d.w2});
    blocks.push_back({std::string(prefix) + "_b2", &d.b2});
  };
  blocks.push_back({"a_reg", &p.a_reg});
  decoder("dec_reg", p.dec_reg);
  if (p.mode == ModelMode::dsr) {
    blocks.push_back({"a_det", &p.a_det});
    decoder("dec_det", p.dec_det);
  }
  return blocks;
}

inline std::vector<ConstParamBlock> param_blocks(const ModelParams& p) {
  auto mutable_blocks = param_blocks(const_cast<ModelParams&>(p));
  std::vector<ConstParamBlock> blocks;
  blocks.reserve(mutable_blocks.size());
  for (auto& b : mutable_blocks) blocks.push_back({b.name, b.tensor});
  return blocks;
}

inline std::vector<double> pack_params(const ModelParams& p) {
  std::vector<double> out;
  for (const auto& b : param_blocks(p)) {
    out.insert(out.end(), b.tensor->data.begin(), b.tensor->data.end());
  }
  return out;
}

inline void unpack_params(ModelParams& p, const std::vector<double>& flat) {
  std::size_t off = 0;
  for (auto& b : param_blocks(p)) {
    if (off + b.tensor->numel() > flat.size())
      throw NumericsError("unpack_params: flat vector too short");
    std::copy(flat.begin() + off, flat.begin() + off + b.tensor->numel(),
              b.tensor->data.begin());
    off += b.tensor->numel();
  }
  if (off != flat.size())
    throw NumericsError("unpack_params: flat vector size mismatch");
}

namespace detail {

inline void glorot_fill(Tensor& t, std::size_t fan_in, std::size_t fan_out,
                        Rng& rng) {
  const double limit =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data) v = rng.uniform(-limit, limit);
}

// Random rows orthonormalized by modified Gram-Schmidt, two passes.
inline Tensor orthonormal_rows(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor a({rows, cols});
  for (double& v : a.data) v = rng.normal();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = &a.data[r * cols];
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < r; ++k) {
        const double* prev = &a.data[k * cols];
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += row[c] * prev[c];
        for (std::size_t c = 0; c < cols; ++c) row[c] -= dot * prev[c];
      }
    }
    double nrm = 0.0;
    for (std::size_t c = 0; c < cols; ++c) nrm += row[c] * row[c];
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) throw NumericsError("orthonormal init: degenerate row");
    for (std::size_t c = 0; c < cols; ++c) row[c] /= nrm;
  }
  return a;
}

inline Rng block_rng(std::uint64_t seed, const std::string& name) {
  return Rng(mix_seed(seed, fnv1a64(name)));
}

inline DecoderParams make_decoder(const Architecture& arch) {
  const std::size_t d = arch.dsr_dim;
  const std::size_t D = arch.latent_dim;
  const std::size_t h = arch.hidden_size();
  DecoderParams dec;
  dec.w0 = Tensor({D, d});
  dec.b0 = Tensor({D});
  dec.w1 = Tensor({h, D});
  dec.b1 = Tensor({h});
  dec.w2 = Tensor({kNumAttributes, h});
  dec.b2 = Tensor({kNumAttributes});
  return dec;
}

inline void init_decoder(DecoderParams& dec, const Architecture& arch,
                         std::uint64_t seed, const char* prefix) {
  const std::size_t d = arch.dsr_dim;
  const std::size_t D = arch.latent_dim;
  const std::size_t h = arch.hidden_size();
  auto r0 = block_rng(seed, std::string(prefix) + "_w0");
  glorot_fill(dec.w0, d, D, r0);
  auto r1 = block_rng(seed, std::string(prefix) + "_w1");
  glorot_fill(dec.w1, D, h, r1);
  auto r2 = block_rng(seed, std::string(prefix) + "_w2");
  glorot_fill(dec.w2, h, kNumAttributes, r2);
}

}  // namespace detail

// Parameter shells with the right shapes and zero data.
inline ModelParams make_empty_params(const Architecture& arch, ModelMode mode,
                                     const Hyper& hyper = {}) {
  arch.validate();
  hyper.validate();
  ModelParams p;
  p.arch = arch;
  p.hyper = hyper;
  p.mode = mode;
  std::size_t c_in = 1;
  for (std::size_t c_out : arch.conv_channels) {
    p.conv_kernels.push_back(Tensor({c_out, c_in, kKernelRows, kKernelCols}));
    p.conv_biases.push_back(Tensor({c_out}));
    c_in = c_out;
  }
  p.enc_w = Tensor({arch.latent_dim, arch.flatten_size()});
  p.enc_b = Tensor({arch.latent_dim});
  p.a_reg = Tensor({arch.dsr_dim, arch.latent_dim});
  p.dec_reg = detail::make_decoder(arch);
  if (mode == ModelMode::dsr) {
    p.a_det = Tensor({arch.dsr_dim, arch.latent_dim});
    p.dec_det = detail::make_decoder(arch);
  }
  return p;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z = make_empty_params(p.arch, p.mode, p.hyper);
  z.norm = p.norm;
  return z;
}

// Glorot-uniform conv/affine weights, zero biases, orthonormal-row subspace
// maps. Blocks are seeded by name, so rsr and dsr models with the same seed
// share their common weights.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed,
                               ModelMode mode = ModelMode::dsr,
                               const Hyper& hyper = {}) {
  ModelParams p = make_empty_params(arch, mode, hyper);
  std::size_t c_in = 1;
  for (std::size_t s = 0; s < arch.conv_channels.size(); ++s) {
    const std::size_t c_out = arch.conv_channels[s];
    auto rng = detail::block_rng(seed, "conv" + std::to_string(s) + "_kernel");
    detail::glorot_fill(p.conv_kernels[s], c_in * kKernelRows * kKernelCols,
                        c_out * kKernelRows * kKernelCols, rng);
    c_in = c_out;
  }
  auto enc_rng = detail::block_rng(seed, "enc_w");
  detail::glorot_fill(p.enc_w, arch.flatten_size(), arch.latent_dim, enc_rng);
  auto areg_rng = detail::block_rng(seed, "a_reg");
  p.a_reg = detail::orthonormal_rows(arch.dsr_dim, arch.latent_dim, areg_rng);
  detail::init_decoder(p.dec_reg, arch, seed, "dec_reg");
  if (mode == ModelMode::dsr) {
    auto adet_rng = detail::block_rng(seed, "a_det");
    p.a_det = detail::orthonormal_rows(arch.dsr_dim, arch.latent_dim, adet_rng);
    detail::init_decoder(p.dec_det, arch, seed, "dec_det");
  }
  return p;
}

inline Tensor grid_to_input(const FeatureGrid& g) {
  Tensor t({1, kGridRows, kGridCols});
  std::copy(g.values.begin(), g.values.end(), t.data.begin());
  return t;
}

inline Tensor grid_to_target(const FeatureGrid& g) {
  Tensor t({kNumAttributes});
  std::copy(g.values.begin(), g.values.end(), t.data.begin());
  return t;
}

struct EncoderCache {
  Tensor input;
  std::vector<Tensor> pre, post;  // per conv stage
  Tensor flat;
  std::vector<std::uint8_t> drop_mask;
  double drop_rate = 0.0;
  Tensor dropped;
  Tensor d_all;
};

inline EncoderCache encode_cached(const ModelParams& p, const FeatureGrid& g,
                                  bool dropout, std::uint64_t seed) {
  EncoderCache c;
  c.input = grid_to_input(g);
  require_finite(c.input, "encoder input");
  const Tensor* cur = &c.input;
  for (std::size_t s = 0; s < p.conv_kernels.size(); ++s) {
    c.pre.push_back(conv2d_forward(*cur, p.conv_kernels[s], p.conv_biases[s]));
    c.post.push_back(relu_forward(c.pre.back()));
    cur = &c.post.back();
  }
  c.flat = Tensor({cur->numel()});
  c.flat.data = cur->data;
  if (dropout && p.arch.dropout_rate > 0.0) {
    auto d = dropout_forward(c.flat, p.arch.dropout_rate, seed);
    c.dropped = std::move(d.y);
    c.drop_mask = std::move(d.mask);
    c.drop_rate = d.rate;
  } else {
    c.dropped = c.flat;
  }
  c.d_all = affine_forward(c.dropped, p.enc_w, p.enc_b);
  return c;
}

// Deterministic latent (dropout off).
inline Tensor encode(const ModelParams& p, const FeatureGrid& g) {
  return encode_cached(p, g, false, 0).d_all;
}

inline void axpy(Tensor& dst, const Tensor& src, double scale = 1.0) {
  if (!dst.same_shape(src)) throw NumericsError("axpy: shape mismatch");
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += scale * src[i];
}

inline void encode_backward(const ModelParams& p, const EncoderCache& c,
                            const Tensor& dd_all, ModelParams& grads) {
  auto g = affine_backward(c.dropped, p.enc_w, dd_all);
  axpy(grads.enc_w, g.dw);
  axpy(grads.enc_b, g.db);
  Tensor dflat = c.drop_mask.empty()
                     ? std::move(g.dx)
                     : dropout_backward(g.dx, c.drop_mask, c.drop_rate);
  Tensor dcur(c.post.back().shape);
  dcur.data = std::move(dflat.data);
  for (std::size_t s = p.conv_kernels.size(); s-- > 0;) {
    Tensor dpre = relu_backward(c.pre[s], dcur);
    const Tensor& stage_in = s == 0 ? c.input : c.post[s - 1];
    auto cg = conv2d_backward(stage_in, p.conv_kernels[s], dpre);
    axpy(grads.conv_kernels[s], cg.dkernels);
    axpy(grads.conv_biases[s], cg.dbias);
    dcur = std::move(cg.dinput);
  }
}

// d_tilde = A * d_all, no bias.
inline Tensor dsr_project(const Tensor& a, const Tensor& d_all) {
  if (a.shape.size() != 2) throw NumericsError("dsr_project: A must be rank 2");
  const std::size_t d = a.shape[0];
  const std::size_t D = a.shape[1];
  require_shape(d_all, {D}, "dsr_project latent");
  Tensor out({d});
  for (std::size_t r = 0; r < d; ++r) {
    double acc = 0.0;
    const double* row = a.data.data() + r * D;
    for (std::size_t k = 0; k < D; ++k) acc += row[k] * d_all[k];
    out[r] = acc;
  }
  return out;
}

// out += A^T v
inline void accumulate_at_vec(const Tensor& a, const Tensor& v, Tensor& out) {
  const std::size_t d = a.shape[0];
  const std::size_t D = a.shape[1];
  for (std::size_t r = 0; r < d; ++r) {
    const double vr = v[r];
    const double* row = a.data.data() + r * D;
    for (std::size_t k = 0; k < D; ++k) out[k] += row[k] * vr;
  }
}

// dA += u * v^T with u sized like a row count, v like a column count.
inline void accumulate_outer(Tensor& da, const Tensor& u, const Tensor& v) {
  const std::size_t rows = da.shape[0];
  const std::size_t cols = da.shape[1];
  for (std::size_t r = 0; r < rows; ++r) {
    const double ur = u[r];
    double* row = da.data.data() + r * cols;
    for (std::size_t k = 0; k < cols; ++k) row[k] += ur * v[k];
  }
}

struct DecoderCache {
  Tensor z, pre0, post0, pre1, post1, out;
};

inline DecoderCache decode_cached(const DecoderParams& dec, const Tensor& z) {
  DecoderCache c;
  c.z = z;
  c.pre0 = affine_forward(z, dec.w0, dec.b0);
  c.post0 = relu_forward(c.pre0);
  c.pre1 = affine_forward(c.post0, dec.w1, dec.b1);
  c.post1 = relu_forward(c.pre1);
  c.out = affine_forward(c.post1, dec.w2, dec.b2);
  return c;
}

inline void decode_backward(const DecoderParams& dec, const DecoderCache& c,
                            const Tensor& dout, DecoderParams& grads,
                            Tensor& dz) {
  auto g2 = affine_backward(c.post1, dec.w2, dout);
  axpy(grads.w2, g2.dw);
  axpy(grads.b2, g2.db);
  Tensor dpre1 = relu_backward(c.pre1, g2.dx);
  auto g1 = affine_backward(c.post0, dec.w1, dpre1);
  axpy(grads.w1, g1.dw);
  axpy(grads.b1, g1.db);
  Tensor dpre0 = relu_backward(c.pre0, g1.dx);
  auto g0 = affine_backward(c.z, dec.w0, dpre0);
  axpy(grads.w0, g0.dw);
  axpy(grads.b0, g0.db);
  dz = std::move(g0.dx);
}

inline Tensor decode_regular(const ModelParams& p, const Tensor& z_reg) {
  return decode_cached(p.dec_reg, z_reg).out;
}

inline Tensor decode_detention(const ModelParams& p, const Tensor& z_det) {
  if (p.mode != ModelMode::dsr) throw NumericsError("branch absent");
  return decode_cached(p.dec_det, z_det).out;
}

inline constexpr double kTinyNorm = 1e-300;

// sum over masked samples of ||x - xhat||_2^p. Empty mask yields 0.
inline double loss_recon(double p, const std::vector<Tensor>& xs,
                         const std::vector<Tensor>& xhats,
                         const std::vector<std::uint8_t>& mask) {
  if (!(p > 0.0)) throw NumericsError("loss_recon: p must be > 0");
  if (xs.size() != xhats.size() || xs.size() != mask.size())
    throw NumericsError("loss_recon: size mismatch");
  double total = 0.0;
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (!mask[t]) continue;
    if (!xs[t].same_shape(xhats[t]))
      throw NumericsError("loss_recon: sample shape mismatch");
    double ss = 0.0;
    for (std::size_t i = 0; i < xs[t].numel(); ++i) {
      const double r = xs[t][i] - xhats[t][i];
      ss += r * r;
    }
    total += std::pow(std::sqrt(ss), p);
  }
  return total;
}

// d/dxhat of the masked term; entries for unmasked samples stay empty.
inline std::vector<Tensor> loss_recon_backward(
    double p, const std::vector<Tensor>& xs, const std::vector<Tensor>& xhats,
    const std::vector<std::uint8_t>& mask) {
  std::vector<Tensor> dxhats(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) {
    if (!mask[t]) continue;
    dxhats[t] = Tensor(xs[t].shape);
    double ss = 0.0;
    for (std::size_t i = 0; i < xs[t].numel(); ++i) {
      const double r = xs[t][i] - xhats[t][i];
      ss += r * r;
    }
    const double nr = std::sqrt(ss);
    if (nr <= kTinyNorm) continue;
    const double scale = -p * std::pow(nr, p - 2.0);
    for (std::size_t i = 0; i < xs[t].numel(); ++i) {
      dxhats[t][i] = scale * (xs[t][i] - xhats[t][i]);
    }
  }
  return dxhats;
}

// lambda1 * sum_masked ||d - A^T(A d)||_2^q + lambda2 * ||A A^T - I||_F^2.
inline double loss_dsr(const Tensor& a, const std::vector<Tensor>& latents,
                       double q, double lambda1, double lambda2,
                       const std::vector<std::uint8_t>& mask) {
  if (!(q > 0.0)) throw NumericsError("loss_dsr: q must be > 0");
  if (latents.size() != mask.size())
    throw NumericsError("loss_dsr: size mismatch");
  const std::size_t d = a.shape[0];
  const std::size_t D = a.shape[1];
  double proj = 0.0;
  for (std::size_t t = 0; t < latents.size(); ++t) {
    if (!mask[t]) continue;
    require_shape(latents[t], {D}, "loss_dsr latent");
    Tensor ad = dsr_project(a, latents[t]);
    Tensor back({D});
    accumulate_at_vec(a, ad, back);
    double ss = 0.0;
    for (std::size_t k = 0; k < D; ++k) {
      const double r = latents[t][k] - back[k];
      ss += r * r;
    }
    proj += std::pow(std::sqrt(ss), q);
  }
  // Gram residual A A^T - I_d
  double fro = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t s = 0; s < d; ++s) {
      double g = 0.0;
      const double* row_r = a.data.data() + r * D;
      const double* row_s = a.data.data() + s * D;
      for (std::size_t k = 0; k < D; ++k) g += row_r[k] * row_s[k];
      if (r == s) g -= 1.0;
      fro += g * g;
    }
  }
  return lambda1 * proj + lambda2 * fro;
}

struct DsrGrads {
  Tensor da;
  std::vector<Tensor> dlatents;  // empty entries for unmasked samples
};

inline DsrGrads loss_dsr_backward(const Tensor& a,
                                  const std::vector<Tensor>& latents, double q,
                                  double lambda1, double lambda2,
                                  const std::vector<std::uint8_t>& mask) {
  const std::size_t d = a.shape[0];
  const std::size_t D = a.shape[1];
  DsrGrads g{Tensor(a.shape), std::vector<Tensor>(latents.size())};
  for (std::size_t t = 0; t < latents.size(); ++t) {
    if (!mask[t]) continue;
    const Tensor& lat = latents[t];
    Tensor ad = dsr_project(a, lat);
    Tensor back({D});
    accumulate_at_vec(a, ad, back);
    Tensor r({D});
    double ss = 0.0;
    for (std::size_t k = 0; k < D; ++k) {
      r[k] = lat[k] - back[k];
      ss += r[k] * r[k];
    }
    const double nr = std::sqrt(ss);
    g.dlatents[t] = Tensor({D});
    if (nr <= kTinyNorm) continue;
    // u = lambda1 * q * ||r||^(q-2) * r
    Tensor u({D});
    const double scale = lambda1 * q * std::pow(nr, q - 2.0);
    for (std::size_t k = 0; k < D; ++k) u[k] = scale * r[k];
    // dA += -(A d) u^T - (A u) d^T
    Tensor au = dsr_project(a, u);
    Tensor neg_ad({d}), neg_au({d});
    for (std::size_t k = 0; k < d; ++k) {
      neg_ad[k] = -ad[k];
      neg_au[k] = -au[k];
    }
    accumulate_outer(g.da, neg_ad, u);
    accumulate_outer(g.da, neg_au, lat);
    // dlatent = (I - A^T A) u
    Tensor atau({D});
    accumulate_at_vec(a, au, atau);
    for (std::size_t k = 0; k < D; ++k) g.dlatents[t][k] = u[k] - atau[k];
  }
  // Frobenius term: dA += lambda2 * 4 * (A A^T - I) A
  Tensor gram({d, d});
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t s = 0; s < d; ++s) {
      double acc = 0.0;
      const double* row_r = a.data.data() + r * D;
      const double* row_s = a.data.data() + s * D;
      for (std::size_t k = 0; k < D; ++k) acc += row_r[k] * row_s[k];
      gram[r * d + s] = acc - (r == s ? 1.0 : 0.0);
    }
  }
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t k = 0; k < D; ++k) {
      double acc = 0.0;
      for (std::size_t s = 0; s < d; ++s) {
        acc += gram[r * d + s] * a.data[s * D + k];
      }
      g.da[r * D + k] += lambda2 * 4.0 * acc;
    }
  }
  return g;
}

namespace detail {

struct MarginTables {
  std::size_t n = 0;
  std::vector<double> n1, n2;           // code norms per view
  std::vector<std::uint8_t> anchor, member;  // zero-norm codes drop out
  std::vector<double> sim, ex;          // n*n, valid (anchor,member) only
  std::vector<double> psum, ssum;
  std::size_t anchors_counted = 0;
};

inline MarginTables margin_tables(const std::vector<Tensor>& view1,
                                  const std::vector<Tensor>& view2,
                                  const std::vector<std::uint8_t>& labels,
                                  double tau) {
  if (!(tau > 0.0)) throw NumericsError("loss_margin: tau must be > 0");
  const std::size_t n = view1.size();
  if (view2.size() != n || labels.size() != n)
    throw NumericsError("loss_margin: size mismatch");
  bool has_pos = false, has_neg = false;
  for (auto y : labels) (y ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg) throw DataError("margin loss needs both classes");

  MarginTables t;
  t.n = n;
  t.n1.resize(n);
  t.n2.resize(n);
  t.anchor.resize(n);
  t.member.resize(n);
  const std::size_t m = view1.empty() ? 0 : view1[0].numel();
  for (std::size_t i = 0; i < n; ++i) {
    if (view1[i].numel() != m || view2[i].numel() != m)
      throw NumericsError("loss_margin: code length mismatch");
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      s1 += view1[i][k] * view1[i][k];
      s2 += view2[i][k] * view2[i][k];
    }
    t.n1[i] = std::sqrt(s1);
    t.n2[i] = std::sqrt(s2);
    t.anchor[i] = s1 > 0.0;
    t.member[i] = s2 > 0.0;
  }
  t.sim.assign(n * n, 0.0);
  t.ex.assign(n * n, 0.0);
  t.psum.assign(n, 0.0);
  t.ssum.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!t.anchor[i]) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (!t.member[j]) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < m; ++k) dot += view1[i][k] * view2[j][k];
      const double s = dot / (t.n1[i] * t.n2[j]);
      t.sim[i * n + j] = s;
      const double e = std::exp(s / tau);
      t.ex[i * n + j] = e;
      if (labels[j] == labels[i]) t.psum[i] += e;
      t.ssum[i] += e;
    }
    if (t.psum[i] > 0.0) ++t.anchors_counted;
  }
  return t;
}

}  // namespace detail

// Supervised contrastive loss over two dropout views. For each anchor i
// (view 1), positives are the view-2 codes of same-class samples including
// its own, negatives the view-2 codes of the other class:
//   L = -mean_i log( sum_pos e^{sim/tau} / (sum_pos e^{sim/tau} + sum_neg e^{sim/tau}) )
// A code that collapsed to zero norm (fully dead activations) has no cosine
// direction; such samples drop out of the term instead of aborting training.
inline double loss_margin(const std::vector<Tensor>& view1,
                          const std::vector<Tensor>& view2,
                          const std::vector<std::uint8_t>& labels, double tau) {
  auto t = detail::margin_tables(view1, view2, labels, tau);
  if (t.anchors_counted == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < t.n; ++i) {
    if (!t.anchor[i] || t.psum[i] <= 0.0) continue;
    total += -std::log(t.psum[i]) + std::log(t.ssum[i]);
  }
  return total / static_cast<double>(t.anchors_counted);
}

struct MarginGrads {
  std::vector<Tensor> dview1, dview2;
};

inline MarginGrads loss_margin_backward(const std::vector<Tensor>& view1,
                                        const std::vector<Tensor>& view2,
                                        const std::vector<std::uint8_t>& labels,
                                        double tau) {
  auto t = detail::margin_tables(view1, view2, labels, tau);
  const std::size_t n = t.n;
  const std::size_t m = view1.empty() ? 0 : view1[0].numel();
  MarginGrads g;
  g.dview1.assign(n, Tensor({m}));
  g.dview2.assign(n, Tensor({m}));
  if (t.anchors_counted == 0) return g;
  const double inv_count = 1.0 / static_cast<double>(t.anchors_counted);
  for (std::size_t i = 0; i < n; ++i) {
    if (!t.anchor[i] || t.psum[i] <= 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) {
      if (!t.member[j]) continue;
      const bool same = labels[j] == labels[i];
      const double gs = inv_count / tau * t.ex[i * n + j] *
                        (1.0 / t.ssum[i] - (same ? 1.0 / t.psum[i] : 0.0));
      if (gs == 0.0) continue;
      const double s = t.sim[i * n + j];
      const double inv = 1.0 / (t.n1[i] * t.n2[j]);
      for (std::size_t k = 0; k < m; ++k) {
        g.dview1[i][k] +=
            gs * (view2[j][k] * inv - s * view1[i][k] / (t.n1[i] * t.n1[i]));
        g.dview2[j][k] +=
            gs * (view1[i][k] * inv - s * view2[j][k] / (t.n2[j] * t.n2[j]));
      }
    }
  }
  return g;
}

// A training batch of normalized grids.
struct Batch {
  std::vector<FeatureGrid> grids;
  std::vector<std::uint8_t> detained;
  std::vector<std::string> ids;

  std::size_t size() const { return grids.size(); }
};

inline Batch make_batch(const std::vector<PscRecord>& records,
                        const NormStats& norm) {
  Batch b;
  b.grids.reserve(records.size());
  b.detained.reserve(records.size());
  b.ids.reserve(records.size());
  for (const auto& r : records) {
    b.grids.push_back(apply_normalizer(encode_record(r), norm));
    b.detained.push_back(r.detained ? 1 : 0);
    b.ids.push_back(r.id);
  }
  return b;
}

struct LossBreakdown {
  double recon_reg = 0.0;
  double recon_det = 0.0;
  double dsr_reg = 0.0;
  double dsr_det = 0.0;
  double margin = 0.0;
  double total = 0.0;
};

// Which terms participate; used by the per-term gradient checks.
struct TermMask {
  bool recon_reg = true;
  bool recon_det = true;
  bool dsr_reg = true;
  bool dsr_det = true;
  bool margin = true;
};

struct TotalLossResult {
  LossBreakdown terms;
  ModelParams grads;
};

// Full loss with analytic gradients:
//   L = L_reg^p + L_det^p + dsr(A_reg | regulars) + dsr(A_det | detained)
//       + lambda3 * margin.
// rsr mode keeps only the regular-branch terms. The two contrastive views
// are drawn with dropout seeds derived from view_seed and the sample index.
inline TotalLossResult total_loss_masked(const ModelParams& p,
                                         const Batch& batch,
                                         std::uint64_t view_seed,
                                         TermMask term_mask) {
  if (batch.size() == 0) throw DataError("total_loss: empty batch");
  const bool dsr_mode = p.mode == ModelMode::dsr;
  if (!dsr_mode) {
    term_mask.recon_det = false;
    term_mask.dsr_det = false;
    term_mask.margin = false;
  }
  const bool margin_on = term_mask.margin && p.hyper.lambda3 > 0.0;
  const std::size_t n = batch.size();

  TotalLossResult res;
  res.grads = zeros_like(p);

  std::vector<std::uint8_t> reg_mask(n), det_mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    reg_mask[i] = batch.detained[i] ? 0 : 1;
    det_mask[i] = batch.detained[i] ? 1 : 0;
  }

  std::vector<EncoderCache> clean(n);
  std::vector<Tensor> xs(n), d_all(n);
  for (std::size_t i = 0; i < n; ++i) {
    clean[i] = encode_cached(p, batch.grids[i], false, 0);
    d_all[i] = clean[i].d_all;
    xs[i] = grid_to_target(batch.grids[i]);
  }
  std::vector<Tensor> dd_clean(n, Tensor({p.arch.latent_dim}));

  auto recon_branch = [&](const Tensor& a, const DecoderParams& dec,
                          const std::vector<std::uint8_t>& mask, Tensor& da,
                          DecoderParams& dec_grads) {
    std::vector<DecoderCache> caches(n);
    std::vector<Tensor> xhats(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      caches[i] = decode_cached(dec, dsr_project(a, d_all[i]));
      xhats[i] = caches[i].out;
    }
    const double value = loss_recon(p.hyper.p, xs, xhats, mask);
    auto dxhats = loss_recon_backward(p.hyper.p, xs, xhats, mask);
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[i]) continue;
      Tensor dz;
      decode_backward(dec, caches[i], dxhats[i], dec_grads, dz);
      accumulate_outer(da, dz, d_all[i]);
      accumulate_at_vec(a, dz, dd_clean[i]);
    }
    return value;
  };

  if (term_mask.recon_reg) {
    res.terms.recon_reg =
        recon_branch(p.a_reg, p.dec_reg, reg_mask, res.grads.a_reg,
                     res.grads.dec_reg);
  }
  if (term_mask.recon_det) {
    res.terms.recon_det =
        recon_branch(p.a_det, p.dec_det, det_mask, res.grads.a_det,
                     res.grads.dec_det);
  }

  auto dsr_branch = [&](const Tensor& a, const std::vector<std::uint8_t>& mask,
                        Tensor& da) {
    const double value =
        loss_dsr(a, d_all, p.hyper.q, p.hyper.lambda1, p.hyper.lambda2, mask);
    auto g = loss_dsr_backward(a, d_all, p.hyper.q, p.hyper.lambda1,
                               p.hyper.lambda2, mask);
    axpy(da, g.da);
    for (std::size_t i = 0; i < n; ++i) {
      if (!g.dlatents[i].empty()) axpy(dd_clean[i], g.dlatents[i]);
    }
    return value;
  };

  if (term_mask.dsr_reg) {
    res.terms.dsr_reg = dsr_branch(p.a_reg, reg_mask, res.grads.a_reg);
  }
  if (term_mask.dsr_det) {
    res.terms.dsr_det = dsr_branch(p.a_det, det_mask, res.grads.a_det);
  }

  if (margin_on) {
    const std::size_t d = p.arch.dsr_dim;
    std::vector<EncoderCache> v1(n), v2(n);
    std::vector<Tensor> z1(n), z2(n);
    auto concat_codes = [&](const Tensor& lat) {
      Tensor z({2 * d});
      Tensor zr = dsr_project(p.a_reg, lat);
      Tensor zd = dsr_project(p.a_det, lat);
      std::copy(zr.data.begin(), zr.data.end(), z.data.begin());
      std::copy(zd.data.begin(), zd.data.end(), z.data.begin() + d);
      return z;
    };
    for (std::size_t i = 0; i < n; ++i) {
      v1[i] = encode_cached(p, batch.grids[i], true, mix_seed(view_seed, 2 * i));
      v2[i] =
          encode_cached(p, batch.grids[i], true, mix_seed(view_seed, 2 * i + 1));
      z1[i] = concat_codes(v1[i].d_all);
      z2[i] = concat_codes(v2[i].d_all);
    }
    res.terms.margin = loss_margin(z1, z2, batch.detained, p.hyper.tau);
    auto mg = loss_margin_backward(z1, z2, batch.detained, p.hyper.tau);
    auto backprop_view = [&](const EncoderCache& cache, const Tensor& dz) {
      Tensor dz_reg({d}), dz_det({d});
      for (std::size_t k = 0; k < d; ++k) {
        dz_reg[k] = p.hyper.lambda3 * dz[k];
        dz_det[k] = p.hyper.lambda3 * dz[k + d];
      }
      accumulate_outer(res.grads.a_reg, dz_reg, cache.d_all);
      accumulate_outer(res.grads.a_det, dz_det, cache.d_all);
      Tensor dlat({p.arch.latent_dim});
      accumulate_at_vec(p.a_reg, dz_reg, dlat);
      accumulate_at_vec(p.a_det, dz_det, dlat);
      encode_backward(p, cache, dlat, res.grads);
    };
    for (std::size_t i = 0; i < n; ++i) {
      backprop_view(v1[i], mg.dview1[i]);
      backprop_view(v2[i], mg.dview2[i]);
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    encode_backward(p, clean[i], dd_clean[i], res.grads);
  }

  res.terms.total = res.terms.recon_reg + res.terms.recon_det +
                    res.terms.dsr_reg + res.terms.dsr_det +
                    p.hyper.lambda3 * res.terms.margin;
  if (!std::isfinite(res.terms.total)) {
    throw NumericsError("total_loss: non-finite loss");
  }
  return res;
}

inline TotalLossResult total_loss(const ModelParams& p, const Batch& batch,
                                  std::uint64_t view_seed) {
  return total_loss_masked(p, batch, view_seed, TermMask{});
}

struct SampleScore {
  std::string id;
  double re_reg = 0.0;
  std::optional<double> re_det;
  double score = 0.5;
};

// Reconstruction distances through each branch; their normalized ratio is
// the detention score. rsr mode squashes the single distance monotonically.
inline SampleScore detention_score(const ModelParams& p, const FeatureGrid& g,
                                   std::string id = "") {
  SampleScore s;
  s.id = std::move(id);
  const Tensor d_all = encode(p, g);
  const Tensor x = grid_to_target(g);
  auto branch_error = [&x](const Tensor& xhat) {
    double ss = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double r = x[i] - xhat[i];
      ss += r * r;
    }
    return std::sqrt(ss);
  };
  s.re_reg = branch_error(decode_regular(p, dsr_project(p.a_reg, d_all)));
  if (p.mode == ModelMode::dsr) {
    s.re_det = branch_error(decode_detention(p, dsr_project(p.a_det, d_all)));
    const double denom = s.re_reg + *s.re_det;
    s.score = denom > 0.0 ? s.re_reg / denom : 0.5;
  } else {
    s.score = s.re_reg / (1.0 + s.re_reg);
  }
  return s;
}

inline std::vector<SampleScore> score_records(
    const ModelParams& p, const std::vector<PscRecord>& records) {
  std::vector<SampleScore> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back(detention_score(
        p, apply_normalizer(encode_record(r), p.norm), r.id));
  }
  return out;
}

struct EpochStats {
  double mean_loss = 0.0;   // per sample
  LossBreakdown mean_terms;
  std::size_t batches = 0;
  std::size_t samples = 0;
};

inline void apply_update(ModelParams& params, const ModelParams& grads,
                         double lr) {
  auto pb = param_blocks(params);
  auto gb = param_blocks(const_cast<ModelParams&>(grads));
  if (pb.size() != gb.size()) throw NumericsError("apply_update: block mismatch");
  for (std::size_t i = 0; i < pb.size(); ++i) {
    Tensor& t = *pb[i].tensor;
    const Tensor& g = *gb[i].tensor;
    if (!t.same_shape(g)) throw NumericsError("apply_update: shape mismatch");
    for (std::size_t k = 0; k < t.numel(); ++k) t[k] -= lr * g[k];
    require_finite(t, "updated parameters");
  }
}

// One pass of plain gradient descent over stratified batches. When the
// margin term is active every batch holds at least one sample of each class,
// so the batch count never exceeds the size of either class.
inline EpochStats train_epoch(ModelParams& params, const Batch& dataset,
                              double lr, std::size_t batch_size,
                              std::uint64_t seed) {
  const std::size_t n = dataset.size();
  if (n == 0) throw DataError("train_epoch: empty dataset");
  if (batch_size == 0) throw DataError("train_epoch: batch_size must be > 0");
  std::vector<std::size_t> det_idx, reg_idx;
  for (std::size_t i = 0; i < n; ++i) {
    (dataset.detained[i] ? det_idx : reg_idx).push_back(i);
  }
  Rng det_rng(mix_seed(seed, 11));
  Rng reg_rng(mix_seed(seed, 12));
  det_rng.shuffle(det_idx);
  reg_rng.shuffle(reg_idx);

  const bool margin_active =
      params.mode == ModelMode::dsr && params.hyper.lambda3 > 0.0;
  std::size_t n_batches = (n + batch_size - 1) / batch_size;
  if (margin_active) {
    if (det_idx.empty() || reg_idx.empty()) {
      throw DataError(
          "train_epoch: margin loss needs both classes in the dataset");
    }
    n_batches = std::min({n_batches, det_idx.size(), reg_idx.size()});
  }
  n_batches = std::max<std::size_t>(n_batches, 1);

  std::vector<std::vector<std::size_t>> members(n_batches);
  for (std::size_t t = 0; t < det_idx.size(); ++t) {
    members[t % n_batches].push_back(det_idx[t]);
  }
  for (std::size_t t = 0; t < reg_idx.size(); ++t) {
    members[t % n_batches].push_back(reg_idx[t]);
  }

  EpochStats stats;
  stats.batches = n_batches;
  stats.samples = n;
  for (std::size_t b = 0; b < n_batches; ++b) {
    Batch sub;
    sub.grids.reserve(members[b].size());
    for (std::size_t i : members[b]) {
      sub.grids.push_back(dataset.grids[i]);
      sub.detained.push_back(dataset.detained[i]);
      if (!dataset.ids.empty()) sub.ids.push_back(dataset.ids[i]);
    }
    TotalLossResult res;
    try {
      res = total_loss(params, sub, mix_seed(seed, 1000 + b));
    } catch (const NumericsError& e) {
      throw NumericsError("train_epoch aborted at batch " + std::to_string(b) +
                          ": " + e.what());
    }
    if (lr != 0.0) apply_update(params, res.grads, lr);
    stats.mean_terms.recon_reg += res.terms.recon_reg;
    stats.mean_terms.recon_det += res.terms.recon_det;
    stats.mean_terms.dsr_reg += res.terms.dsr_reg;
    stats.mean_terms.dsr_det += res.terms.dsr_det;
    stats.mean_terms.margin += res.terms.margin;
    stats.mean_terms.total += res.terms.total;
  }
  const double inv = 1.0 / static_cast<double>(n);
  stats.mean_terms.recon_reg *= inv;
  stats.mean_terms.recon_det *= inv;
  stats.mean_terms.dsr_reg *= inv;
  stats.mean_terms.dsr_det *= inv;
  stats.mean_terms.margin *= inv;
  stats.mean_terms.total *= inv;
  stats.mean_loss = stats.mean_terms.total;
  return stats;
}

}  // namespace pscdet
