#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "quadrank/core.hpp"
#include "quadrank/image.hpp"

namespace quadrank {

// ---------------------------------------------------------------------------
// Architecture description
//
// Notation: c(f,i,o,p) convolution with an f x f filter, i input and o output
// channels, zero padding p, stride 1; f(i,o) fully connected; e ELU;
// b or b(n) batch normalization; (list)^n repeats a group n times.

enum class LayerKind { conv, fully_connected, elu, batchnorm };

struct LayerSpec {
  LayerKind kind = LayerKind::elu;
  int filter = 0;
  int in = 0;
  int out = 0;
  int pad = 0;

  static LayerSpec conv(int f, int i, int o, int p) {
    return {LayerKind::conv, f, i, o, p};
  }
  static LayerSpec fc(int i, int o) { return {LayerKind::fully_connected, 0, i, o, 0}; }
  static LayerSpec elu() { return {LayerKind::elu, 0, 0, 0, 0}; }
  // channels == 0 means "infer from the preceding layer"
  static LayerSpec batchnorm(int channels = 0) {
    return {LayerKind::batchnorm, 0, channels, channels, 0};
  }

  std::string notation() const {
    switch (kind) {
      case LayerKind::conv:
        return "c(" + std::to_string(filter) + "," + std::to_string(in) + "," +
               std::to_string(out) + "," + std::to_string(pad) + ")";
      case LayerKind::fully_connected:
        return "f(" + std::to_string(in) + "," + std::to_string(out) + ")";
      case LayerKind::elu:
        return "e";
      case LayerKind::batchnorm:
        return "b(" + std::to_string(in) + ")";
    }
    return "?";
  }

  bool operator==(const LayerSpec&) const = default;
};

struct Shape {
  int c = 1, h = 1, w = 1;
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
  bool operator==(const Shape&) const = default;
};

inline constexpr Shape kPatchShape{1, kPatchSize, kPatchSize};

inline std::optional<std::string_view> preset_notation(std::string_view name) {
  if (name == "linear") return "c(17,1,1,0)";
  if (name == "mlp32") return "c(17,1,32,0),e,f(32,1)";
  if (name == "shallow-fc") return "c(17,1,32,0),e,f(32,32),e,f(32,1)";
  if (name == "deep-fc") return "c(17,1,32,0),e,(f(32,32),e)^8,f(32,1)";
  if (name == "deep-conv") return "c(7,1,32,3),b,e,(c(7,32,32,3),b,e)^8,c(17,32,1,0)";
  return std::nullopt;
}

namespace detail {

class ArchParser {
 public:
  explicit ArchParser(std::string_view text) : text_(text) {}

  std::vector<LayerSpec> parse() {
    auto out = list();
    skip();
    if (pos_ != text_.size()) fail("unexpected trailing input");
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw Error("bad architecture '" + std::string(text_) + "': " + what + " at offset " +
                std::to_string(pos_));
  }
  void skip() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }
  bool accept(char c) {
    skip();
    if (pos_ < text_.size() && text_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  void expect(char c) {
    if (!accept(c)) fail(std::string("expected '") + c + "'");
  }
  int integer() {
    skip();
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      v = v * 10 + (text_[pos_++] - '0');
      if (v > 1'000'000) fail("integer too large");
    }
    if (start == pos_) fail("expected integer");
    return static_cast<int>(v);
  }
  std::vector<int> args(std::size_t n) {
    expect('(');
    std::vector<int> v;
    for (std::size_t k = 0; k < n; ++k) {
      if (k) expect(',');
      v.push_back(integer());
    }
    expect(')');
    return v;
  }
  std::vector<LayerSpec> list() {
    std::vector<LayerSpec> out;
    do {
      auto part = item();
      out.insert(out.end(), part.begin(), part.end());
    } while (accept(','));
    return out;
  }
  std::vector<LayerSpec> item() {
    skip();
    if (pos_ >= text_.size()) fail("unexpected end");
    const char c = text_[pos_];
    if (c == '(') {
      ++pos_;
      auto group = list();
      expect(')');
      int reps = 1;
      if (accept('^')) reps = integer();
      if (reps < 1) fail("repeat count must be >= 1");
      std::vector<LayerSpec> out;
      for (int r = 0; r < reps; ++r) out.insert(out.end(), group.begin(), group.end());
      return out;
    }
    ++pos_;
    switch (c) {
      case 'c': {
        auto a = args(4);
        return {LayerSpec::conv(a[0], a[1], a[2], a[3])};
      }
      case 'f': {
        auto a = args(2);
        return {LayerSpec::fc(a[0], a[1])};
      }
      case 'e':
        return {LayerSpec::elu()};
      case 'b': {
        skip();
        if (pos_ < text_.size() && text_[pos_] == '(') return {LayerSpec::batchnorm(args(1)[0])};
        return {LayerSpec::batchnorm()};
      }
      default:
        --pos_;
        fail(std::string("unknown layer '") + c + "'");
    }
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// Resolves a preset name or a layer list, infers batchnorm widths and checks
// that the stack maps a 17x17 patch to one scalar. Returns the per-layer input
// shapes alongside the layers (shapes has one extra entry: the output).
struct ResolvedArchitecture {
  std::vector<LayerSpec> layers;
  std::vector<Shape> shapes;
};

inline ResolvedArchitecture resolve_architecture(std::string_view arch) {
  const auto preset = preset_notation(arch);
  ResolvedArchitecture r;
  r.layers = detail::ArchParser(preset ? *preset : arch).parse();
  if (r.layers.empty()) throw Error("architecture has no layers");
  Shape s = kPatchShape;
  r.shapes.push_back(s);
  for (std::size_t k = 0; k < r.layers.size(); ++k) {
    LayerSpec& l = r.layers[k];
    const std::string where = "layer " + std::to_string(k) + " (" + l.notation() + ")";
    switch (l.kind) {
      case LayerKind::conv: {
        if (l.filter < 1 || l.in < 1 || l.out < 1 || l.pad < 0)
          throw Error("dimension mismatch: " + where + " has invalid parameters");
        if (l.in != s.c)
          throw Error("dimension mismatch: " + where + " expects " + std::to_string(l.in) +
                      " channels, got " + std::to_string(s.c));
        Shape o{l.out, s.h + 2 * l.pad - l.filter + 1, s.w + 2 * l.pad - l.filter + 1};
        if (o.h < 1 || o.w < 1)
          throw Error("dimension mismatch: " + where + " filter larger than input");
        s = o;
        break;
      }
      case LayerKind::fully_connected:
        if (l.in < 1 || l.out < 1)
          throw Error("dimension mismatch: " + where + " has invalid parameters");
        if (static_cast<std::size_t>(l.in) != s.size())
          throw Error("dimension mismatch: " + where + " expects " + std::to_string(l.in) +
                      " inputs, got " + std::to_string(s.size()));
        s = Shape{l.out, 1, 1};
        break;
      case LayerKind::elu:
        break;
      case LayerKind::batchnorm:
        if (l.in == 0) l.in = l.out = s.c;
        if (l.in != s.c)
          throw Error("dimension mismatch: " + where + " expects " + std::to_string(l.in) +
                      " channels, got " + std::to_string(s.c));
        break;
    }
    r.shapes.push_back(s);
  }
  if (s.size() != 1)
    throw Error("dimension mismatch: network output has " + std::to_string(s.size()) +
                " values, expected 1");
  return r;
}

// ---------------------------------------------------------------------------
// Model

enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// A batch of activations with a common shape, item-major.
template <class T>
struct Batch {
  Shape shape;
  int n = 0;
  std::vector<T> data;

  Batch() = default;
  Batch(Shape s, int count) : shape(s), n(count), data(s.size() * count, T{}) {}

  T* item(int i) { return data.data() + shape.size() * i; }
  const T* item(int i) const { return data.data() + shape.size() * i; }
};

template <class T>
struct ForwardCache {
  Mode mode = Mode::eval;
  std::vector<Batch<T>> activations;  // input of each layer, then the output
  // per batchnorm layer (indexed by layer): batch mean and 1/sqrt(var + eps)
  std::vector<std::vector<T>> bn_mean;
  std::vector<std::vector<T>> bn_var;
  std::vector<std::vector<T>> bn_invstd;

  int batch_size() const { return activations.empty() ? 0 : activations.front().n; }
};

template <class T>
struct ForwardResult {
  std::vector<T> responses;
  ForwardCache<T> cache;
};

template <class T>
class BasicResponseModel {
 public:
  BasicResponseModel() = default;

  // Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, batchnorm gain 1
  // and shift 0, running mean 0 and variance 1.
  BasicResponseModel(std::string_view arch, std::uint64_t seed) : architecture_(arch) {
    setup(resolve_architecture(arch));
    Rng rng(seed);
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const LayerSpec& l = layers_[k];
      T* p = params_.data() + param_offset_[k];
      if (l.kind == LayerKind::conv || l.kind == LayerKind::fully_connected) {
        const std::size_t fan_in =
            l.kind == LayerKind::conv ? static_cast<std::size_t>(l.in) * l.filter * l.filter
                                      : static_cast<std::size_t>(l.in);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        const std::size_t nw = weight_count(l);
        for (std::size_t i = 0; i < nw; ++i) p[i] = static_cast<T>(rng.uniform(-bound, bound));
      } else if (l.kind == LayerKind::batchnorm) {
        for (int c = 0; c < l.in; ++c) p[c] = T(1);
        T* b = buffers_.data() + buffer_offset_[k];
        for (int c = 0; c < l.in; ++c) b[l.in + c] = T(1);
      }
    }
  }

  const std::string& architecture() const { return architecture_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<Shape>& shapes() const { return shapes_; }
  std::size_t param_count() const { return params_.size(); }

  std::span<T> params() { return params_; }
  std::span<const T> params() const { return params_; }
  // Batchnorm running statistics; not trainable.
  std::span<T> buffers() { return buffers_; }
  std::span<const T> buffers() const { return buffers_; }

  std::size_t param_offset(std::size_t layer) const { return param_offset_.at(layer); }
  std::size_t param_size(std::size_t layer) const { return param_size(layers_.at(layer)); }
  std::size_t buffer_offset(std::size_t layer) const { return buffer_offset_.at(layer); }
  std::size_t buffer_size(std::size_t layer) const { return buffer_size(layers_.at(layer)); }

  bool has_batchnorm() const {
    for (const auto& l : layers_)
      if (l.kind == LayerKind::batchnorm) return true;
    return false;
  }

  template <class U>
  BasicResponseModel<U> cast() const {
    BasicResponseModel<U> m;
    m.architecture_ = architecture_;
    m.layers_ = layers_;
    m.shapes_ = shapes_;
    m.param_offset_ = param_offset_;
    m.buffer_offset_ = buffer_offset_;
    m.params_.assign(params_.begin(), params_.end());
    m.buffers_.assign(buffers_.begin(), buffers_.end());
    return m;
  }

  ForwardResult<T> forward(const Batch<T>& input, Mode mode) const {
    if (!(input.shape == kPatchShape)) throw Error("forward: input must be 1x17x17 patches");
    if (input.n < 1) throw Error("forward: empty batch");
    ForwardResult<T> r;
    ForwardCache<T>& cache = r.cache;
    cache.mode = mode;
    cache.bn_mean.resize(layers_.size());
    cache.bn_var.resize(layers_.size());
    cache.bn_invstd.resize(layers_.size());
    cache.activations.reserve(layers_.size() + 1);
    cache.activations.push_back(input);
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const Batch<T>& in = cache.activations.back();
      Batch<T> out(shapes_[k + 1], in.n);
      const LayerSpec& l = layers_[k];
      const T* p = params_.data() + param_offset_[k];
      switch (l.kind) {
        case LayerKind::conv:
          conv_forward(l, shapes_[k], shapes_[k + 1], p, in, out);
          break;
        case LayerKind::fully_connected:
          fc_forward(l, p, in, out);
          break;
        case LayerKind::elu:
          for (std::size_t i = 0; i < in.data.size(); ++i) {
            const T x = in.data[i];
            out.data[i] = x > T(0) ? x : std::expm1(x);
          }
          break;
        case LayerKind::batchnorm:
          bn_forward(k, p, in, out, cache);
          break;
      }
      cache.activations.push_back(std::move(out));
    }
    const Batch<T>& last = cache.activations.back();
    r.responses.assign(last.data.begin(), last.data.end());
    return r;
  }

  // Reverse-mode gradient of sum_i upstream[i] * response_i with respect to
  // the trainable parameters. Accumulates into grad (size param_count()).
  void backward(const ForwardCache<T>& cache, std::span<const T> upstream,
                std::span<T> grad) const {
    const int n = cache.batch_size();
    if (upstream.size() != static_cast<std::size_t>(n))
      throw Error("backward: upstream size does not match batch");
    if (grad.size() != params_.size()) throw Error("backward: gradient size mismatch");
    Batch<T> dout(shapes_.back(), n);
    std::copy(upstream.begin(), upstream.end(), dout.data.begin());
    for (std::size_t k = layers_.size(); k-- > 0;) {
      const LayerSpec& l = layers_[k];
      const Batch<T>& in = cache.activations[k];
      const Batch<T>& out = cache.activations[k + 1];
      const T* p = params_.data() + param_offset_[k];
      T* g = grad.data() + param_offset_[k];
      const bool need_input_grad = k > 0;
      Batch<T> din;
      if (need_input_grad) din = Batch<T>(shapes_[k], n);
      switch (l.kind) {
        case LayerKind::conv:
          conv_backward(l, shapes_[k], shapes_[k + 1], p, in, dout, g,
                        need_input_grad ? &din : nullptr);
          break;
        case LayerKind::fully_connected:
          fc_backward(l, p, in, dout, g, need_input_grad ? &din : nullptr);
          break;
        case LayerKind::elu:
          if (need_input_grad) {
            for (std::size_t i = 0; i < in.data.size(); ++i) {
              din.data[i] = in.data[i] > T(0) ? dout.data[i] : dout.data[i] * (out.data[i] + T(1));
            }
          }
          break;
        case LayerKind::batchnorm:
          bn_backward(k, p, in, dout, cache, g, need_input_grad ? &din : nullptr);
          break;
      }
      if (!need_input_grad) break;
      dout = std::move(din);
    }
  }

  std::vector<T> backward(const ForwardCache<T>& cache, std::span<const T> upstream) const {
    std::vector<T> grad(params_.size(), T{});
    backward(cache, upstream, std::span<T>(grad));
    return grad;
  }

  // Folds the batch statistics of a train-mode pass into the running averages.
  void update_running_stats(const ForwardCache<T>& cache) {
    if (cache.mode != Mode::train) return;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      if (layers_[k].kind != LayerKind::batchnorm) continue;
      const int C = layers_[k].in;
      const Shape s = shapes_[k];
      const double m = static_cast<double>(cache.batch_size()) * s.h * s.w;
      const double unbias = m > 1 ? m / (m - 1) : 1.0;
      T* b = buffers_.data() + buffer_offset_[k];
      for (int c = 0; c < C; ++c) {
        b[c] = static_cast<T>((1 - kBatchNormMomentum) * b[c] +
                              kBatchNormMomentum * cache.bn_mean[k][c]);
        b[C + c] = static_cast<T>((1 - kBatchNormMomentum) * b[C + c] +
                                  kBatchNormMomentum * cache.bn_var[k][c] * unbias);
      }
    }
  }

  bool operator==(const BasicResponseModel&) const = default;

 private:
  template <class U>
  friend class BasicResponseModel;
  template <class U>
  friend BasicResponseModel<U> make_model_from_parts(std::string_view, std::vector<U>,
                                                     std::vector<U>);

  static std::size_t weight_count(const LayerSpec& l) {
    switch (l.kind) {
      case LayerKind::conv:
        return static_cast<std::size_t>(l.out) * l.in * l.filter * l.filter;
      case LayerKind::fully_connected:
        return static_cast<std::size_t>(l.out) * l.in;
      default:
        return 0;
    }
  }
  static std::size_t param_size(const LayerSpec& l) {
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::fully_connected:
        return weight_count(l) + l.out;
      case LayerKind::batchnorm:
        return 2 * static_cast<std::size_t>(l.in);
      case LayerKind::elu:
        return 0;
    }
    return 0;
  }
  static std::size_t buffer_size(const LayerSpec& l) {
    return l.kind == LayerKind::batchnorm ? 2 * static_cast<std::size_t>(l.in) : 0;
  }

  void setup(ResolvedArchitecture r) {
    layers_ = std::move(r.layers);
    shapes_ = std::move(r.shapes);
    std::size_t np = 0, nb = 0;
    for (const auto& l : layers_) {
      param_offset_.push_back(np);
      buffer_offset_.push_back(nb);
      np += param_size(l);
      nb += buffer_size(l);
    }
    params_.assign(np, T{});
    buffers_.assign(nb, T{});
  }

  static void conv_forward(const LayerSpec& l, Shape is, Shape os, const T* p,
                           const Batch<T>& in, Batch<T>& out) {
    const T* weights = p;
    const T* bias = p + weight_count(l);
    const int f = l.filter, pad = l.pad;
    for (int b = 0; b < in.n; ++b) {
      const T* src = in.item(b);
      T* dst = out.item(b);
      for (int o = 0; o < os.c; ++o) {
        T* dplane = dst + static_cast<std::size_t>(o) * os.h * os.w;
        std::fill(dplane, dplane + os.h * os.w, bias[o]);
        for (int i = 0; i < is.c; ++i) {
          const T* splane = src + static_cast<std::size_t>(i) * is.h * is.w;
          const T* wk = weights + (static_cast<std::size_t>(o) * is.c + i) * f * f;
          for (int ky = 0; ky < f; ++ky) {
            for (int kx = 0; kx < f; ++kx) {
              const T w = wk[ky * f + kx];
              const int x_lo = std::max(0, pad - kx);
              const int x_hi = std::min(os.w, is.w + pad - kx);
              for (int y = 0; y < os.h; ++y) {
                const int sy = y + ky - pad;
                if (sy < 0 || sy >= is.h) continue;
                const T* srow = splane + static_cast<std::size_t>(sy) * is.w + (kx - pad);
                T* drow = dplane + static_cast<std::size_t>(y) * os.w;
                for (int x = x_lo; x < x_hi; ++x) drow[x] += w * srow[x];
              }
            }
          }
        }
      }
    }
  }

  static void conv_backward(const LayerSpec& l, Shape is, Shape os, const T* p,
                            const Batch<T>& in, const Batch<T>& dout, T* g, Batch<T>* din) {
    const T* weights = p;
    T* gw = g;
    T* gb = g + weight_count(l);
    const int f = l.filter, pad = l.pad;
    for (int b = 0; b < in.n; ++b) {
      const T* src = in.item(b);
      const T* up = dout.item(b);
      T* dsrc = din ? din->item(b) : nullptr;
      for (int o = 0; o < os.c; ++o) {
        const T* uplane = up + static_cast<std::size_t>(o) * os.h * os.w;
        T bsum{};
        for (int i = 0; i < os.h * os.w; ++i) bsum += uplane[i];
        gb[o] += bsum;
        for (int i = 0; i < is.c; ++i) {
          const T* splane = src + static_cast<std::size_t>(i) * is.h * is.w;
          T* dplane = dsrc ? dsrc + static_cast<std::size_t>(i) * is.h * is.w : nullptr;
          const std::size_t wbase = (static_cast<std::size_t>(o) * is.c + i) * f * f;
          for (int ky = 0; ky < f; ++ky) {
            for (int kx = 0; kx < f; ++kx) {
              const T w = weights[wbase + ky * f + kx];
              const int x_lo = std::max(0, pad - kx);
              const int x_hi = std::min(os.w, is.w + pad - kx);
              T acc{};
              for (int y = 0; y < os.h; ++y) {
                const int sy = y + ky - pad;
                if (sy < 0 || sy >= is.h) continue;
                const std::size_t soff = static_cast<std::size_t>(sy) * is.w + (kx - pad);
                const T* urow = uplane + static_cast<std::size_t>(y) * os.w;
                const T* srow = splane + soff;
                for (int x = x_lo; x < x_hi; ++x) acc += urow[x] * srow[x];
                if (dplane) {
                  T* drow = dplane + soff;
                  for (int x = x_lo; x < x_hi; ++x) drow[x] += urow[x] * w;
                }
              }
              gw[wbase + ky * f + kx] += acc;
            }
          }
        }
      }
    }
  }

  static void fc_forward(const LayerSpec& l, const T* p, const Batch<T>& in, Batch<T>& out) {
    const T* bias = p + weight_count(l);
    for (int b = 0; b < in.n; ++b) {
      const T* x = in.item(b);
      T* y = out.item(b);
      for (int o = 0; o < l.out; ++o) {
        const T* wr = p + static_cast<std::size_t>(o) * l.in;
        T acc = bias[o];
        for (int i = 0; i < l.in; ++i) acc += wr[i] * x[i];
        y[o] = acc;
      }
    }
  }

  static void fc_backward(const LayerSpec& l, const T* p, const Batch<T>& in,
                          const Batch<T>& dout, T* g, Batch<T>* din) {
    T* gb = g + weight_count(l);
    for (int b = 0; b < in.n; ++b) {
      const T* x = in.item(b);
      const T* up = dout.item(b);
      T* dx = din ? din->item(b) : nullptr;
      for (int o = 0; o < l.out; ++o) {
        const T u = up[o];
        gb[o] += u;
        T* gw = g + static_cast<std::size_t>(o) * l.in;
        const T* wr = p + static_cast<std::size_t>(o) * l.in;
        for (int i = 0; i < l.in; ++i) gw[i] += u * x[i];
        if (dx)
          for (int i = 0; i < l.in; ++i) dx[i] += u * wr[i];
      }
    }
  }

  void bn_forward(std::size_t k, const T* p, const Batch<T>& in, Batch<T>& out,
                  ForwardCache<T>& cache) const {
    const int C = layers_[k].in;
    const std::size_t hw = static_cast<std::size_t>(in.shape.h) * in.shape.w;
    const T* gain = p;
    const T* shift = p + C;
    std::vector<T> mean(C), var(C), invstd(C);
    if (cache.mode == Mode::train) {
      const double m = static_cast<double>(in.n) * hw;
      for (int c = 0; c < C; ++c) {
        double s = 0;
        for (int b = 0; b < in.n; ++b) {
          const T* x = in.item(b) + c * hw;
          for (std::size_t i = 0; i < hw; ++i) s += x[i];
        }
        const double mu = s / m;
        double ss = 0;
        for (int b = 0; b < in.n; ++b) {
          const T* x = in.item(b) + c * hw;
          for (std::size_t i = 0; i < hw; ++i) ss += (x[i] - mu) * (x[i] - mu);
        }
        mean[c] = static_cast<T>(mu);
        var[c] = static_cast<T>(ss / m);
        invstd[c] = static_cast<T>(1.0 / std::sqrt(ss / m + kBatchNormEps));
      }
    } else {
      const T* run = buffers_.data() + buffer_offset_[k];
      for (int c = 0; c < C; ++c) {
        mean[c] = run[c];
        var[c] = run[C + c];
        invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(run[C + c]) + kBatchNormEps));
      }
    }
    for (int b = 0; b < in.n; ++b) {
      for (int c = 0; c < C; ++c) {
        const T* x = in.item(b) + c * hw;
        T* y = out.item(b) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) y[i] = gain[c] * (x[i] - mean[c]) * invstd[c] + shift[c];
      }
    }
    cache.bn_mean[k] = std::move(mean);
    cache.bn_var[k] = std::move(var);
    cache.bn_invstd[k] = std::move(invstd);
  }

  void bn_backward(std::size_t k, const T* p, const Batch<T>& in, const Batch<T>& dout,
                   const ForwardCache<T>& cache, T* g, Batch<T>* din) const {
    const int C = layers_[k].in;
    const std::size_t hw = static_cast<std::size_t>(in.shape.h) * in.shape.w;
    const T* gain = p;
    const auto& mean = cache.bn_mean[k];
    const auto& invstd = cache.bn_invstd[k];
    const double m = static_cast<double>(in.n) * hw;
    for (int c = 0; c < C; ++c) {
      T sum_dy{}, sum_dy_xhat{};
      for (int b = 0; b < in.n; ++b) {
        const T* x = in.item(b) + c * hw;
        const T* dy = dout.item(b) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * (x[i] - mean[c]) * invstd[c];
        }
      }
      g[c] += sum_dy_xhat;
      g[C + c] += sum_dy;
      if (!din) continue;
      for (int b = 0; b < in.n; ++b) {
        const T* x = in.item(b) + c * hw;
        const T* dy = dout.item(b) + c * hw;
        T* dx = din->item(b) + c * hw;
        if (cache.mode == Mode::train) {
          // statistics depend on the inputs
          for (std::size_t i = 0; i < hw; ++i) {
            const T xhat = (x[i] - mean[c]) * invstd[c];
            dx[i] = static_cast<T>(gain[c] * invstd[c] *
                                   (dy[i] - sum_dy / m - xhat * sum_dy_xhat / m));
          }
        } else {
          for (std::size_t i = 0; i < hw; ++i) dx[i] = gain[c] * invstd[c] * dy[i];
        }
      }
    }
  }

  std::string architecture_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> shapes_;
  std::vector<std::size_t> param_offset_;
  std::vector<std::size_t> buffer_offset_;
  std::vector<T> params_;
  std::vector<T> buffers_;
};

using ResponseModel = BasicResponseModel<float>;

// Rebuilds a model from stored arrays (used by the file reader).
template <class T>
BasicResponseModel<T> make_model_from_parts(std::string_view arch, std::vector<T> params,
                                            std::vector<T> buffers) {
  BasicResponseModel<T> m;
  m.architecture_ = std::string(arch);
  m.setup(resolve_architecture(arch));
  if (params.size() != m.params_.size() || buffers.size() != m.buffers_.size())
    throw Error("parameter payload does not match architecture '" + std::string(arch) + "'");
  m.params_ = std::move(params);
  m.buffers_ = std::move(buffers);
  return m;
}

inline ResponseModel build_model(std::string_view arch, std::uint64_t seed) {
  return ResponseModel(arch, seed);
}

template <class T>
Batch<T> make_patch_batch(std::span<const Patch17> patches) {
  Batch<T> b(kPatchShape, static_cast<int>(patches.size()));
  for (std::size_t i = 0; i < patches.size(); ++i) {
    std::copy(patches[i].values.begin(), patches[i].values.end(), b.item(static_cast<int>(i)));
  }
  return b;
}

template <class T>
struct PatchForward {
  T response{};
  ForwardCache<T> cache;
};

template <class T>
PatchForward<T> forward_patch(const BasicResponseModel<T>& model, const Patch17& patch,
                              Mode mode = Mode::eval) {
  auto r = model.forward(make_patch_batch<T>(std::span<const Patch17>(&patch, 1)), mode);
  return {r.responses.front(), std::move(r.cache)};
}

template <class T>
std::vector<T> backward_patch(const BasicResponseModel<T>& model, const ForwardCache<T>& cache,
                              T upstream) {
  return model.backward(cache, std::span<const T>(&upstream, 1));
}

// ---------------------------------------------------------------------------
// Dense evaluation

namespace detail {

// Per-window moments from integral images of mean-shifted values. Windows whose
// variance falls near the cancellation floor are recomputed directly so the
// degenerate flat-patch rule matches normalize_patch exactly.
class WindowMoments {
 public:
  explicit WindowMoments(const GrayImage& img) : img_(img) {
    const int w = img.width(), h = img.height();
    double total = 0;
    for (float v : img.pixels()) total += v;
    shift_ = total / static_cast<double>(img.pixels().size());
    stride_ = static_cast<std::size_t>(w) + 1;
    sum_.assign(stride_ * (h + 1), 0.0);
    sq_.assign(stride_ * (h + 1), 0.0);
    for (int y = 0; y < h; ++y) {
      double rs = 0, rq = 0;
      for (int x = 0; x < w; ++x) {
        const double v = img(x, y) - shift_;
        rs += v;
        rq += v * v;
        sum_[(y + 1) * stride_ + x + 1] = sum_[y * stride_ + x + 1] + rs;
        sq_[(y + 1) * stride_ + x + 1] = sq_[y * stride_ + x + 1] + rq;
      }
    }
  }

  // Mean and population stddev of the 17x17 window with top-left (x, y).
  std::pair<double, double> at(int x, int y) const {
    constexpr int n = kPatchSize;
    const double cells = n * n;
    const double s = box(sum_, x, y);
    const double q = box(sq_, x, y);
    const double mean_shifted = s / cells;
    const double var = q / cells - mean_shifted * mean_shifted;
    if (var > 1e-10) return {mean_shifted + shift_, std::sqrt(var)};
    double direct = 0;
    for (int v = 0; v < n; ++v)
      for (int u = 0; u < n; ++u) direct += img_(x + u, y + v);
    const double mean = direct / cells;
    double ss = 0;
    for (int v = 0; v < n; ++v)
      for (int u = 0; u < n; ++u) ss += (img_(x + u, y + v) - mean) * (img_(x + u, y + v) - mean);
    return {mean, std::sqrt(ss / cells)};
  }

 private:
  double box(const std::vector<double>& t, int x, int y) const {
    constexpr int n = kPatchSize;
    return t[(y + n) * stride_ + x + n] - t[y * stride_ + x + n] - t[(y + n) * stride_ + x] +
           t[y * stride_ + x];
  }

  const GrayImage& img_;
  double shift_ = 0;
  std::size_t stride_ = 0;
  std::vector<double> sum_, sq_;
};

}  // namespace detail

// Responses at every position whose 17x17 window fits; output pixel (x, y)
// belongs to image position (x + 8, y + 8). Every window is standardized
// independently, exactly as the training patches are, and batchnorm runs in
// eval mode.
template <class T>
ResponseMap forward_dense(const BasicResponseModel<T>& model, const GrayImage& level) {
  if (level.width() < kPatchSize || level.height() < kPatchSize)
    throw Error("forward_dense: level smaller than 17x17");
  const int ow = level.width() - kPatchSize + 1;
  const int oh = level.height() - kPatchSize + 1;
  ResponseMap out(ow, oh);
  const detail::WindowMoments moments(level);
  const auto& layers = model.layers();
  const LayerSpec& first = layers.front();
  bool factored = first.kind == LayerKind::conv && first.filter == kPatchSize &&
                  first.pad == 0 && first.in == 1;
  for (std::size_t k = 1; factored && k < model.shapes().size(); ++k) {
    factored = model.shapes()[k].h == 1 && model.shapes()[k].w == 1;
  }

  if (factored) {
    // First layer on a standardized window: (w . p - mean * sum(w)) / std + b.
    const int C = first.out;
    const std::size_t nw = static_cast<std::size_t>(C) * kPatchSize * kPatchSize;
    const auto params = model.params();
    std::vector<double> weights(params.begin(), params.begin() + nw);
    std::vector<double> bias(params.begin() + nw, params.begin() + nw + C);
    std::vector<double> wsum(C, 0.0);
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < kPatchSize * kPatchSize; ++i) wsum[c] += weights[c * kPatchSize * kPatchSize + i];
    // Tail network: layers 1.. on a C x 1 x 1 input.
    std::vector<LayerSpec> tail(layers.begin() + 1, layers.end());
    parallel_for(static_cast<std::size_t>(oh), [&](std::size_t yi) {
      const int y = static_cast<int>(yi);
      Batch<T> act(Shape{C, 1, 1}, ow);
      std::vector<double> corr(C);
      for (int x = 0; x < ow; ++x) {
        std::fill(corr.begin(), corr.end(), 0.0);
        for (int v = 0; v < kPatchSize; ++v) {
          const float* row = level.row(y + v) + x;
          for (int c = 0; c < C; ++c) {
            const double* wr = weights.data() + (c * kPatchSize + v) * kPatchSize;
            double acc = 0;
            for (int u = 0; u < kPatchSize; ++u) acc += wr[u] * row[u];
            corr[c] += acc;
          }
        }
        const auto [mean, sd] = moments.at(x, y);
        T* a = act.item(x);
        for (int c = 0; c < C; ++c) {
          a[c] = sd < kDegenerateStddev ? static_cast<T>(bias[c])
                                        : static_cast<T>((corr[c] - mean * wsum[c]) / sd + bias[c]);
        }
      }
      Batch<T> cur = std::move(act);
      for (std::size_t k = 1; k < layers.size(); ++k) {
        const LayerSpec& l = layers[k];
        Batch<T> nxt(model.shapes()[k + 1], ow);
        const T* p = model.params().data() + model.param_offset(k);
        if (l.kind == LayerKind::fully_connected) {
          const T* b = p + static_cast<std::size_t>(l.in) * l.out;
          for (int x = 0; x < ow; ++x) {
            const T* in = cur.item(x);
            T* o = nxt.item(x);
            for (int j = 0; j < l.out; ++j) {
              T acc = b[j];
              const T* wr = p + static_cast<std::size_t>(j) * l.in;
              for (int i = 0; i < l.in; ++i) acc += wr[i] * in[i];
              o[j] = acc;
            }
          }
        } else if (l.kind == LayerKind::elu) {
          for (std::size_t i = 0; i < cur.data.size(); ++i) {
            const T v = cur.data[i];
            nxt.data[i] = v > T(0) ? v : std::expm1(v);
          }
        } else if (l.kind == LayerKind::batchnorm) {
          const T* run = model.buffers().data() + model.buffer_offset(k);
          const int Cb = l.in;
          for (int x = 0; x < ow; ++x) {
            const T* in = cur.item(x);
            T* o = nxt.item(x);
            for (int c = 0; c < Cb; ++c) {
              const T invstd =
                  static_cast<T>(1.0 / std::sqrt(static_cast<double>(run[Cb + c]) + kBatchNormEps));
              o[c] = p[c] * (in[c] - run[c]) * invstd + p[Cb + c];
            }
          }
        } else {
          // conv on a C x 1 x 1 map: only the center tap contributes
          const int f = l.filter;
          const T* b = p + static_cast<std::size_t>(l.out) * l.in * f * f;
          const int center = l.pad;
          for (int x = 0; x < ow; ++x) {
            const T* in = cur.item(x);
            T* o = nxt.item(x);
            for (int j = 0; j < l.out; ++j) {
              T acc = b[j];
              for (int i = 0; i < l.in; ++i) {
                acc += p[((static_cast<std::size_t>(j) * l.in + i) * f + center) * f + center] * in[i];
              }
              o[j] = acc;
            }
          }
        }
        cur = std::move(nxt);
      }
      float* dst = out.row(y);
      for (int x = 0; x < ow; ++x) dst[x] = static_cast<float>(cur.item(x)[0]);
    });
    return out;
  }

  parallel_for(static_cast<std::size_t>(oh), [&](std::size_t yi) {
    const int y = static_cast<int>(yi);
    std::vector<Patch17> patches(ow);
    for (int x = 0; x < ow; ++x) {
      Patch17 raw;
      for (int v = 0; v < kPatchSize; ++v)
        for (int u = 0; u < kPatchSize; ++u) raw.values[v * kPatchSize + u] = level(x + u, y + v);
      patches[x] = normalize_patch(raw);
    }
    const auto r = model.forward(make_patch_batch<T>(patches), Mode::eval);
    float* dst = out.row(y);
    for (int x = 0; x < ow; ++x) dst[x] = static_cast<float>(r.responses[x]);
  });
  return out;
}

}  // namespace quadrank
