#include "stn/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "stn/error.hpp"
#include "stn/kernels.hpp"

namespace stn {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kInitStd = 0.02;

struct BlockCache {
  Matrix xhat1;
  Vector rstd1;
  Matrix h1;
  Matrix qkv;
  std::vector<Matrix> probs;  // per head, T×T
  Matrix attn;                // T×c, heads concatenated
  Matrix xhat2;
  Vector rstd2;
  Matrix h2;
  Matrix pre;  // fc1 output before GELU
  Matrix act;
};

struct ForwardCache {
  Matrix patches;  // M×patch_dim, standardized pixels
  std::vector<BlockCache> blocks;
  Matrix xhat_final;
  Vector rstd_final;
  Matrix out;  // T×c
};

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

void layer_norm(const Matrix& x, const Matrix& w, const Matrix& b, Matrix& xhat, Vector& rstd,
                Matrix& y) {
  const std::size_t t = x.rows(), c = x.cols();
  xhat = Matrix(t, c);
  y = Matrix(t, c);
  rstd.assign(t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[i] = r;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (row[j] - mean) * r;
      xhat(i, j) = xh;
      y(i, j) = xh * w.data()[j] + b.data()[j];
    }
  }
}

// Accumulates into dx, dw, db.
void layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd, const Matrix& w,
                         Matrix& dx, Matrix& dw, Matrix& db) {
  const std::size_t t = dy.rows(), c = dy.cols();
  Vector dxhat(c);
  for (std::size_t i = 0; i < t; ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double g = dy(i, j);
      dw.data()[j] += g * xhat(i, j);
      db.data()[j] += g;
      dxhat[j] = g * w.data()[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xhat(i, j);
    }
    mean_d /= static_cast<double>(c);
    mean_dx /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j)
      dx(i, j) += rstd[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
  }
}

void linear(const Matrix& x, const Matrix& w, const Matrix& b, Matrix& y) {
  y = Matrix(x.rows(), w.cols());
  kernels::gemm(x.data().data(), w.data().data(), y.data().data(), x.rows(), x.cols(), w.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double* r = y.row(i).data();
    for (std::size_t j = 0; j < y.cols(); ++j) r[j] += b.data()[j];
  }
}

// dW += xᵀ·dy, db += colsum(dy); dx (if non-null) += dy·Wᵀ.
void linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw, Matrix& db,
                     Matrix* dx) {
  kernels::gemm_tn_acc(x.data().data(), dy.data().data(), dw.data().data(), x.cols(), x.rows(),
                       dy.cols());
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    const auto r = dy.row(i);
    for (std::size_t j = 0; j < dy.cols(); ++j) db.data()[j] += r[j];
  }
  if (dx != nullptr)
    kernels::gemm_nt(dy.data().data(), w.data().data(), dx->data().data(), dy.rows(), dy.cols(),
                     w.rows(), /*accumulate=*/true);
}

void check_image(const EncoderConfig& cfg, const Image& img) {
  if (img.height != cfg.image_size || img.width != cfg.image_size || img.channels != cfg.channels ||
      img.pixels.size() != img.height * img.width * img.channels)
    fail(ErrorKind::DimensionMismatch,
         "image " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
             std::to_string(img.channels) + " does not match encoder input " +
             std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
             std::to_string(cfg.channels));
}

Matrix patchify(const EncoderConfig& cfg, const Image& img) {
  const std::size_t p = cfg.patch_size, g = cfg.grid(), ch = cfg.channels;
  Matrix patches(cfg.num_patches(), cfg.patch_dim());
  for (std::size_t py = 0; py < g; ++py)
    for (std::size_t px = 0; px < g; ++px) {
      double* dst = patches.row(py * g + px).data();
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t c = 0; c < ch; ++c)
            *dst++ = (img.at(py * p + dy, px * p + dx, c) - kPixelMean) / kPixelStd;
    }
  return patches;
}

void forward(const EncoderParams& prm, const Image& img, ForwardCache& cache) {
  const EncoderConfig& cfg = prm.config;
  check_image(cfg, img);
  const std::size_t c = cfg.embed_dim, t = cfg.tokens(), m = cfg.num_patches();
  const std::size_t heads = cfg.heads, dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  cache.patches = patchify(cfg, img);
  Matrix x(t, c);
  {
    Matrix emb;
    linear(cache.patches, prm.patch_w, prm.patch_b, emb);
    for (std::size_t j = 0; j < c; ++j) x(0, j) = prm.cls_token.data()[j] + prm.pos_embed(0, j);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) x(i + 1, j) = emb(i, j) + prm.pos_embed(i + 1, j);
  }

  cache.blocks.resize(prm.blocks.size());
  for (std::size_t l = 0; l < prm.blocks.size(); ++l) {
    const BlockParams& bp = prm.blocks[l];
    BlockCache& bc = cache.blocks[l];

    layer_norm(x, bp.norm1_w, bp.norm1_b, bc.xhat1, bc.rstd1, bc.h1);
    linear(bc.h1, bp.qkv_w, bp.qkv_b, bc.qkv);
    bc.attn = Matrix(t, c);
    bc.probs.assign(heads, Matrix(t, t));
    for (std::size_t h = 0; h < heads; ++h) {
      Matrix& pr = bc.probs[h];
      const std::size_t qo = h * dh, ko = c + h * dh, vo = 2 * c + h * dh;
      for (std::size_t i = 0; i < t; ++i) {
        const double* q = bc.qkv.row(i).data() + qo;
        double mx = -INFINITY;
        for (std::size_t s = 0; s < t; ++s) {
          const double* k = bc.qkv.row(s).data() + ko;
          double v = 0.0;
          for (std::size_t d = 0; d < dh; ++d) v += q[d] * k[d];
          pr(i, s) = v * scale;
          mx = std::max(mx, pr(i, s));
        }
        double sum = 0.0;
        for (std::size_t s = 0; s < t; ++s) {
          pr(i, s) = std::exp(pr(i, s) - mx);
          sum += pr(i, s);
        }
        double* o = bc.attn.row(i).data() + qo;
        for (std::size_t s = 0; s < t; ++s) {
          pr(i, s) /= sum;
          const double p = pr(i, s);
          const double* v = bc.qkv.row(s).data() + vo;
          for (std::size_t d = 0; d < dh; ++d) o[d] += p * v[d];
        }
      }
    }
    Matrix proj;
    linear(bc.attn, bp.proj_w, bp.proj_b, proj);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += proj.data()[i];

    layer_norm(x, bp.norm2_w, bp.norm2_b, bc.xhat2, bc.rstd2, bc.h2);
    linear(bc.h2, bp.fc1_w, bp.fc1_b, bc.pre);
    bc.act = bc.pre;
    for (double& v : bc.act.data()) v = gelu(v);
    Matrix mlp;
    linear(bc.act, bp.fc2_w, bp.fc2_b, mlp);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += mlp.data()[i];
  }
  layer_norm(x, prm.norm_w, prm.norm_b, cache.xhat_final, cache.rstd_final, cache.out);
}

// Accumulates parameter gradients for one image into g.
void backward(const EncoderParams& prm, const ForwardCache& cache, const Matrix& dout,
              EncoderParams& g) {
  const EncoderConfig& cfg = prm.config;
  const std::size_t c = cfg.embed_dim, t = cfg.tokens(), m = cfg.num_patches();
  const std::size_t heads = cfg.heads, dh = cfg.head_dim(), hid = cfg.hidden_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dx(t, c);
  layer_norm_backward(dout, cache.xhat_final, cache.rstd_final, prm.norm_w, dx, g.norm_w, g.norm_b);

  for (std::size_t l = prm.blocks.size(); l-- > 0;) {
    const BlockParams& bp = prm.blocks[l];
    const BlockCache& bc = cache.blocks[l];
    BlockParams& gb = g.blocks[l];

    // MLP branch: x3 = x2 + fc2(gelu(fc1(ln2(x2))))
    Matrix dact(t, hid);
    linear_backward(bc.act, bp.fc2_w, dx, gb.fc2_w, gb.fc2_b, &dact);
    for (std::size_t i = 0; i < dact.size(); ++i) dact.data()[i] *= gelu_grad(bc.pre.data()[i]);
    Matrix dh2(t, c);
    linear_backward(bc.h2, bp.fc1_w, dact, gb.fc1_w, gb.fc1_b, &dh2);
    layer_norm_backward(dh2, bc.xhat2, bc.rstd2, bp.norm2_w, dx, gb.norm2_w, gb.norm2_b);

    // Attention branch: x2 = x1 + proj(attn(ln1(x1)))
    Matrix dattn(t, c);
    linear_backward(bc.attn, bp.proj_w, dx, gb.proj_w, gb.proj_b, &dattn);
    Matrix dqkv(t, 3 * c);
    Vector dp(t);
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix& pr = bc.probs[h];
      const std::size_t qo = h * dh, ko = c + h * dh, vo = 2 * c + h * dh;
      for (std::size_t i = 0; i < t; ++i) {
        const double* dO = dattn.row(i).data() + qo;
        double rowdot = 0.0;
        for (std::size_t s = 0; s < t; ++s) {
          const double* v = bc.qkv.row(s).data() + vo;
          double* dv = dqkv.row(s).data() + vo;
          const double p = pr(i, s);
          double acc = 0.0;
          for (std::size_t d = 0; d < dh; ++d) {
            acc += dO[d] * v[d];
            dv[d] += p * dO[d];
          }
          dp[s] = acc;
          rowdot += p * acc;
        }
        const double* q = bc.qkv.row(i).data() + qo;
        double* dq = dqkv.row(i).data() + qo;
        for (std::size_t s = 0; s < t; ++s) {
          const double ds = pr(i, s) * (dp[s] - rowdot) * scale;
          const double* k = bc.qkv.row(s).data() + ko;
          double* dk = dqkv.row(s).data() + ko;
          for (std::size_t d = 0; d < dh; ++d) {
            dq[d] += ds * k[d];
            dk[d] += ds * q[d];
          }
        }
      }
    }
    Matrix dh1(t, c);
    linear_backward(bc.h1, bp.qkv_w, dqkv, gb.qkv_w, gb.qkv_b, &dh1);
    layer_norm_backward(dh1, bc.xhat1, bc.rstd1, bp.norm1_w, dx, gb.norm1_w, gb.norm1_b);
  }

  for (std::size_t j = 0; j < c; ++j) g.cls_token.data()[j] += dx(0, j);
  for (std::size_t i = 0; i < g.pos_embed.size(); ++i) g.pos_embed.data()[i] += dx.data()[i];
  Matrix demb(m, c, std::vector<double>(dx.data().begin() + static_cast<std::ptrdiff_t>(c), dx.data().end()));
  linear_backward(cache.patches, prm.patch_w, demb, g.patch_w, g.patch_b, nullptr);
}

DualEmbedding split_tokens(const Matrix& out) {
  DualEmbedding e;
  const std::size_t c = out.cols();
  e.global.assign(out.row(0).begin(), out.row(0).end());
  e.local = Matrix(out.rows() - 1, c,
                   std::vector<double>(out.data().begin() + static_cast<std::ptrdiff_t>(c), out.data().end()));
  return e;
}

void add_into(EncoderParams& acc, const EncoderParams& g) {
  std::vector<Matrix*> dst;
  acc.visit([&](const std::string&, Matrix& m) { dst.push_back(&m); });
  std::size_t k = 0;
  g.visit([&](const std::string&, const Matrix& m) {
    auto d = dst[k++]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += m.data()[i];
  });
}

Matrix truncated_normal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data()) {
    double z;
    do {
      z = dist(rng);
    } while (std::abs(z) > 2.0);
    v = z * kInitStd;
  }
  return m;
}

}  // namespace

std::size_t EncoderConfig::hidden_dim() const noexcept {
  return static_cast<std::size_t>(std::llround(static_cast<double>(embed_dim) * mlp_ratio));
}

void EncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    fail(ErrorKind::InvalidConfig, "image_size " + std::to_string(image_size) +
                                       " is not divisible by patch_size " + std::to_string(patch_size));
  if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0)
    fail(ErrorKind::InvalidConfig, "embed_dim " + std::to_string(embed_dim) +
                                       " is not divisible by heads " + std::to_string(heads));
  if (channels == 0) fail(ErrorKind::InvalidConfig, "channels must be positive");
  if (depth == 0) fail(ErrorKind::InvalidConfig, "depth must be at least 1");
  if (!(mlp_ratio > 0.0) || hidden_dim() == 0) fail(ErrorKind::InvalidConfig, "mlp_ratio must be positive");
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t c = cfg.embed_dim, hid = cfg.hidden_dim();
  EncoderParams p;
  p.config = cfg;
  p.patch_w = truncated_normal(cfg.patch_dim(), c, rng);
  p.patch_b = Matrix(1, c);
  p.cls_token = truncated_normal(1, c, rng);
  p.pos_embed = truncated_normal(cfg.tokens(), c, rng);
  p.blocks.resize(cfg.depth);
  for (BlockParams& b : p.blocks) {
    b.norm1_w = Matrix(1, c, 1.0);
    b.norm1_b = Matrix(1, c);
    b.qkv_w = truncated_normal(c, 3 * c, rng);
    b.qkv_b = Matrix(1, 3 * c);
    b.proj_w = truncated_normal(c, c, rng);
    b.proj_b = Matrix(1, c);
    b.norm2_w = Matrix(1, c, 1.0);
    b.norm2_b = Matrix(1, c);
    b.fc1_w = truncated_normal(c, hid, rng);
    b.fc1_b = Matrix(1, hid);
    b.fc2_w = truncated_normal(hid, c, rng);
    b.fc2_b = Matrix(1, c);
  }
  p.norm_w = Matrix(1, c, 1.0);
  p.norm_b = Matrix(1, c);
  return p;
}

EncoderParams zeros_like(const EncoderParams& params) {
  EncoderParams z = params;
  z.visit([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

Encoding encode(const EncoderParams& params, const Image& image) {
  ForwardCache cache;
  forward(params, image, cache);
  Encoding e;
  e.embedding = split_tokens(cache.out);
  e.attention.depth = params.blocks.size();
  e.attention.heads = params.config.heads;
  for (BlockCache& bc : cache.blocks)
    for (Matrix& p : bc.probs) e.attention.maps.push_back(std::move(p));
  return e;
}

std::vector<DualEmbedding> encode_batch(const EncoderParams& params, std::span<const Image> images) {
  std::vector<DualEmbedding> out(images.size());
  const auto n = static_cast<std::ptrdiff_t>(images.size());
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) num_threads(kernels::max_threads())
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      ForwardCache cache;
      forward(params, images[static_cast<std::size_t>(i)], cache);
      out[static_cast<std::size_t>(i)] = split_tokens(cache.out);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
  return out;
}

std::vector<DualEmbedding> encode_batch_serial(const EncoderParams& params,
                                               std::span<const Image> images) {
  std::vector<DualEmbedding> out;
  out.reserve(images.size());
  for (const Image& img : images) {
    ForwardCache cache;
    forward(params, img, cache);
    out.push_back(split_tokens(cache.out));
  }
  return out;
}

GradResult grad(const EncoderParams& params, const EmbeddingLoss& loss, std::span<const Image> batch) {
  const std::size_t n = batch.size();
  const std::size_t c = params.config.embed_dim, m = params.config.num_patches();
  std::vector<ForwardCache> caches(n);
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) num_threads(kernels::max_threads())
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    try {
      forward(params, batch[static_cast<std::size_t>(i)], caches[static_cast<std::size_t>(i)]);
    } catch (...) {
#pragma omp critical
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);

  GradResult result;
  result.outputs.reserve(n);
  for (const ForwardCache& fc : caches) result.outputs.push_back(split_tokens(fc.out));
  std::vector<DualEmbedding> adjoints(n);
  for (DualEmbedding& a : adjoints) {
    a.global.assign(c, 0.0);
    a.local = Matrix(m, c);
  }
  result.loss = loss(result.outputs, adjoints);
  if (!std::isfinite(result.loss))
    fail(ErrorKind::NonFiniteLoss, "loss evaluated to " + std::to_string(result.loss));

  // Fixed chunking keeps the summation order, and hence the gradient bits,
  // independent of the thread count.
  constexpr std::size_t kChunks = 8;
  const std::size_t chunks = std::min(kChunks, std::max<std::size_t>(n, 1));
  std::vector<EncoderParams> partial(chunks, zeros_like(params));
#pragma omp parallel for schedule(dynamic) num_threads(kernels::max_threads())
  for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(chunks); ++ci) {
    const auto k = static_cast<std::size_t>(ci);
    for (std::size_t i = k * n / chunks; i < (k + 1) * n / chunks; ++i) {
      Matrix dout(m + 1, c);
      std::copy(adjoints[i].global.begin(), adjoints[i].global.end(), dout.row(0).begin());
      std::copy(adjoints[i].local.data().begin(), adjoints[i].local.data().end(),
                dout.data().begin() + static_cast<std::ptrdiff_t>(c));
      backward(params, caches[i], dout, partial[k]);
    }
  }
  result.grad = std::move(partial[0]);
  for (std::size_t k = 1; k < chunks; ++k) add_into(result.grad, partial[k]);
  return result;
}

}  // namespace stn
