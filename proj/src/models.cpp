#include "pfl/models.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pfl/kernels.hpp"
#include "pfl/rng.hpp"

namespace pfl {

namespace {

std::size_t output_width(const ArchDescriptor& arch) {
  switch (arch.family) {
    case ModelFamily::linear_regression:
    case ModelFamily::linear_svm:
    case ModelFamily::mlp_regressor:
      return 1;
    case ModelFamily::softmax_classifier:
    case ModelFamily::mlp_classifier:
      return arch.num_classes;
  }
  return 1;
}

bool is_mlp(ModelFamily f) { return f == ModelFamily::mlp_classifier || f == ModelFamily::mlp_regressor; }

void check_input(const ModelParams& params, std::size_t dim) {
  if (dim != params.arch.input_dim) {
    throw std::invalid_argument("input dimension " + std::to_string(dim) + " does not match model input_dim " +
                                std::to_string(params.arch.input_dim));
  }
}

void softmax_inplace(std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& z : v) {
    z = std::exp(z - mx);
    sum += z;
  }
  for (double& z : v) z /= sum;
}

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (const double z : v) sum += std::exp(z - mx);
  return mx + std::log(sum);
}

std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Dense affine map: out[r] = W[r, :] . in + b[r], for a layer slice.
void affine(std::span<const double> values, const LayerSlice& layer, std::span<const double> in,
            std::span<double> out) {
  const std::size_t rows = layer.bias_count;
  const std::size_t cols = in.size();
  const double* w = values.data() + layer.offset;
  const double* b = w + layer.weight_count;
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = kernels::dot({w + r * cols, cols}, in) + b[r];
  }
}

// Accumulates d(out)/d(layer) contributions: grad_W[r, :] += g[r] * in, grad_b[r] += g[r].
void affine_backward(const LayerSlice& layer, std::span<const double> in, std::span<const double> g,
                     std::span<double> grad) {
  const std::size_t rows = layer.bias_count;
  const std::size_t cols = in.size();
  double* gw = grad.data() + layer.offset;
  double* gb = gw + layer.weight_count;
  for (std::size_t r = 0; r < rows; ++r) {
    if (g[r] != 0.0) kernels::axpy(g[r], in, {gw + r * cols, cols});
    gb[r] += g[r];
  }
}

struct ForwardPass {
  std::vector<double> hidden;
  std::vector<double> out;
};

void forward(const ModelParams& params, std::span<const double> x, ForwardPass& fp) {
  const auto& arch = params.arch;
  const auto& layers = params.layers;
  fp.out.assign(output_width(arch), 0.0);
  if (is_mlp(arch.family)) {
    fp.hidden.assign(arch.hidden_dim, 0.0);
    affine(params.values, layers[0], x, fp.hidden);
    for (double& h : fp.hidden) h = std::tanh(h);
    affine(params.values, layers[1], fp.hidden, fp.out);
  } else {
    affine(params.values, layers[0], x, fp.out);
  }
}

double weight_norm_sq(const ModelParams& params) {
  double acc = 0.0;
  for (const auto& layer : params.layers) {
    std::span<const double> w(params.values.data() + layer.offset, layer.weight_count);
    acc += kernels::dot(w, w);
  }
  return acc;
}

double signed_label(double y) { return y > 0.5 ? 1.0 : -1.0; }

// Per-example loss and d(loss)/d(out) for the output layer.
double example_loss(ModelFamily family, const ForwardPass& fp, double y, std::vector<double>* dout) {
  switch (family) {
    case ModelFamily::linear_regression:
    case ModelFamily::mlp_regressor: {
      const double r = fp.out[0] - y;
      if (dout) (*dout)[0] = 2.0 * r;
      return r * r;
    }
    case ModelFamily::linear_svm: {
      const double s = signed_label(y);
      const double slack = 1.0 - s * fp.out[0];
      // margin exactly 1 counts as inactive
      if (dout) (*dout)[0] = slack > 0.0 ? -s : 0.0;
      return std::max(0.0, slack);
    }
    case ModelFamily::softmax_classifier:
    case ModelFamily::mlp_classifier: {
      const auto cls = static_cast<std::size_t>(y);
      const double lse = log_sum_exp(fp.out);
      if (dout) {
        for (std::size_t c = 0; c < fp.out.size(); ++c) (*dout)[c] = std::exp(fp.out[c] - lse);
        (*dout)[cls] -= 1.0;
      }
      return lse - fp.out[cls];
    }
  }
  return 0.0;
}

void check_batch(Batch batch) {
  if (batch.empty()) throw std::invalid_argument("loss/gradient over an empty batch");
}

}  // namespace

bool is_linear_family(ModelFamily f) { return !is_mlp(f); }

bool is_classifier(ModelFamily f) {
  return f == ModelFamily::linear_svm || f == ModelFamily::softmax_classifier || f == ModelFamily::mlp_classifier;
}

TaskKind task_of(ModelFamily f) { return is_classifier(f) ? TaskKind::classification : TaskKind::regression; }

void validate_arch(const ArchDescriptor& arch) {
  const std::string fam(to_string(arch.family));
  if (arch.input_dim == 0) throw ConfigError(fam + ": input_dim must be positive");
  if (!(arch.l2_reg >= 0.0)) throw ConfigError(fam + ": l2_reg must be nonnegative");
  switch (arch.family) {
    case ModelFamily::linear_regression:
    case ModelFamily::mlp_regressor:
      if (arch.num_classes != 1) throw ConfigError(fam + ": regression models take num_classes = 1");
      break;
    case ModelFamily::linear_svm:
      if (arch.num_classes != 2) throw ConfigError(fam + ": linear_svm is binary (num_classes = 2)");
      break;
    case ModelFamily::softmax_classifier:
    case ModelFamily::mlp_classifier:
      if (arch.num_classes < 2) throw ConfigError(fam + ": classifiers need num_classes >= 2");
      break;
  }
  if (is_mlp(arch.family) && arch.hidden_dim == 0) throw ConfigError(fam + ": hidden_dim must be positive");
}

std::vector<LayerSlice> layer_layout(const ArchDescriptor& arch) {
  validate_arch(arch);
  const std::size_t out = output_width(arch);
  if (is_mlp(arch.family)) {
    const std::size_t hidden_size = arch.hidden_dim * arch.input_dim + arch.hidden_dim;
    return {
        LayerSlice{"hidden", 0, arch.hidden_dim * arch.input_dim, arch.hidden_dim},
        LayerSlice{"output", hidden_size, out * arch.hidden_dim, out},
    };
  }
  return {LayerSlice{"output", 0, out * arch.input_dim, out}};
}

std::size_t param_count(const ArchDescriptor& arch) { return layer_layout(arch).back().end(); }

ModelParams zero_params(const ArchDescriptor& arch) {
  ModelParams p;
  p.arch = arch;
  p.layers = layer_layout(arch);
  p.values.assign(p.layers.back().end(), 0.0);
  return p;
}

ModelParams init_params(const ArchDescriptor& arch, std::uint64_t seed) {
  ModelParams p = zero_params(arch);
  if (is_linear_family(arch.family)) return p;
  Rng rng = make_rng(seed, hash_string("init_params"));
  for (const auto& layer : p.layers) {
    const std::size_t fan_in = layer.weight_count / layer.bias_count;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < layer.weight_count; ++i) {
      p.values[layer.offset + i] = bound * (2.0 * uniform01(rng) - 1.0);
    }
  }
  return p;
}

Prediction predict(const ModelParams& params, std::span<const double> x) {
  check_input(params, x.size());
  ForwardPass fp;
  forward(params, x, fp);
  Prediction pred;
  switch (params.arch.family) {
    case ModelFamily::linear_regression:
    case ModelFamily::mlp_regressor:
      pred.value = fp.out[0];
      pred.scores = fp.out;
      pred.label = pred.value;
      break;
    case ModelFamily::linear_svm:
      pred.value = fp.out[0];
      pred.scores = {-fp.out[0], fp.out[0]};
      pred.probs = pred.scores;
      softmax_inplace(pred.probs);
      pred.label = pred.value > 0.0 ? 1.0 : 0.0;
      break;
    case ModelFamily::softmax_classifier:
    case ModelFamily::mlp_classifier:
      pred.scores = fp.out;
      pred.probs = fp.out;
      softmax_inplace(pred.probs);
      pred.label = static_cast<double>(argmax_lowest(pred.probs));
      break;
  }
  return pred;
}

double loss(const ModelParams& params, Batch batch) {
  check_batch(batch);
  ForwardPass fp;
  double total = 0.0;
  for (const Example* e : batch) {
    check_input(params, e->x.size());
    forward(params, e->x, fp);
    total += example_loss(params.arch.family, fp, e->y, nullptr);
  }
  double value = total / static_cast<double>(batch.size());
  if (params.arch.l2_reg > 0.0) value += 0.5 * params.arch.l2_reg * weight_norm_sq(params);
  return value;
}

double loss(const ModelParams& params, std::span<const Example> batch) {
  const ExampleRefs refs = refs_of(batch);
  return loss(params, refs);
}

double loss_and_gradient(const ModelParams& params, Batch batch, std::span<double> grad) {
  check_batch(batch);
  if (grad.size() != params.size()) throw std::invalid_argument("gradient buffer length mismatch");
  std::fill(grad.begin(), grad.end(), 0.0);
  const auto& arch = params.arch;
  const bool mlp = is_mlp(arch.family);
  ForwardPass fp;
  std::vector<double> dout(output_width(arch), 0.0);
  std::vector<double> dhidden(mlp ? arch.hidden_dim : 0, 0.0);
  double total = 0.0;

  for (const Example* e : batch) {
    check_input(params, e->x.size());
    forward(params, e->x, fp);
    total += example_loss(arch.family, fp, e->y, &dout);
    if (!mlp) {
      affine_backward(params.layers[0], e->x, dout, grad);
      continue;
    }
    const LayerSlice& out_layer = params.layers[1];
    affine_backward(out_layer, fp.hidden, dout, grad);
    // dhidden = W2^T dout, then through tanh' = 1 - h^2
    std::fill(dhidden.begin(), dhidden.end(), 0.0);
    const double* w2 = params.values.data() + out_layer.offset;
    for (std::size_t c = 0; c < dout.size(); ++c) {
      if (dout[c] != 0.0) kernels::axpy(dout[c], {w2 + c * arch.hidden_dim, arch.hidden_dim}, dhidden);
    }
    for (std::size_t j = 0; j < dhidden.size(); ++j) dhidden[j] *= 1.0 - fp.hidden[j] * fp.hidden[j];
    affine_backward(params.layers[0], e->x, dhidden, grad);
  }

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (double& g : grad) g *= inv_n;
  double value = total * inv_n;
  if (arch.l2_reg > 0.0) {
    for (const auto& layer : params.layers) {
      std::span<const double> w(params.values.data() + layer.offset, layer.weight_count);
      kernels::axpy(arch.l2_reg, w, grad.subspan(layer.offset, layer.weight_count));
    }
    value += 0.5 * arch.l2_reg * weight_norm_sq(params);
  }
  return value;
}

std::vector<double> gradient(const ModelParams& params, Batch batch) {
  std::vector<double> grad(params.size(), 0.0);
  loss_and_gradient(params, batch, grad);
  return grad;
}

std::vector<double> gradient(const ModelParams& params, std::span<const Example> batch) {
  const ExampleRefs refs = refs_of(batch);
  return gradient(params, refs);
}

std::vector<double> representation(const ModelParams& params, std::span<const double> x) {
  check_input(params, x.size());
  if (!is_mlp(params.arch.family)) return {x.begin(), x.end()};
  ForwardPass fp;
  forward(params, x, fp);
  return fp.hidden;
}

double evaluate_metric(const ModelParams& params, Batch batch, MetricKind kind) {
  if (batch.empty()) throw std::invalid_argument("metric over an empty example set");
  double total = 0.0;
  for (const Example* e : batch) {
    const Prediction pred = predict(params, e->x);
    if (kind == MetricKind::accuracy) {
      total += pred.label == e->y ? 1.0 : 0.0;
    } else {
      const double r = pred.label - e->y;
      total += r * r;
    }
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace pfl
