#include "pfl/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "pfl/kernels.hpp"

namespace pfl {

std::string_view to_string(ServerOptKind k) {
  switch (k) {
    case ServerOptKind::avg:
      return "avg";
    case ServerOptKind::adam:
      return "adam";
    case ServerOptKind::fedavgm:
      return "fedavgm";
  }
  return "unknown";
}

ServerOptKind parse_server_opt_kind(std::string_view s) {
  if (s == "avg") return ServerOptKind::avg;
  if (s == "adam") return ServerOptKind::adam;
  if (s == "fedavgm") return ServerOptKind::fedavgm;
  throw ConfigError("unknown server optimizer: '" + std::string(s) + "'");
}

ServerOptState make_server_state(const ServerOptSpec& spec, std::size_t model_size) {
  if (!(spec.lr > 0.0)) throw ConfigError("server lr must be positive");
  ServerOptState state;
  state.spec = spec;
  if (spec.kind == ServerOptKind::adam) {
    if (!(spec.epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
    state.m.assign(model_size, 0.0);
    state.v.assign(model_size, 0.0);
  }
  if (spec.kind == ServerOptKind::fedavgm) state.buffer.assign(model_size, 0.0);
  return state;
}

void sgd_step_inplace(std::span<double> values, std::span<const double> grad, double lr) {
  if (grad.size() != values.size()) throw std::invalid_argument("sgd_step: gradient length mismatch");
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be positive");
  kernels::axpy(-lr, grad, values);
}

ModelParams sgd_step(const ModelParams& params, std::span<const double> grad, double lr) {
  ModelParams out = params;
  sgd_step_inplace(out.values, grad, lr);
  return out;
}

std::pair<ModelParams, ServerOptState> server_apply(const ServerOptState& state, const ModelParams& current,
                                                    std::span<const double> pseudo_grad) {
  const std::size_t n = current.size();
  if (pseudo_grad.size() != n) throw std::invalid_argument("server_apply: pseudo-gradient length mismatch");
  ModelParams next = current;
  ServerOptState advanced = state;
  const auto& spec = state.spec;

  switch (spec.kind) {
    case ServerOptKind::avg:
      kernels::axpy(-spec.lr, pseudo_grad, next.values);
      break;
    case ServerOptKind::fedavgm:
      if (advanced.buffer.size() != n) throw std::invalid_argument("server_apply: momentum buffer length mismatch");
      kernels::scale_add(spec.momentum, pseudo_grad, advanced.buffer);
      kernels::axpy(-spec.lr, advanced.buffer, next.values);
      break;
    case ServerOptKind::adam: {
      if (advanced.m.size() != n || advanced.v.size() != n) {
        throw std::invalid_argument("server_apply: adam moment length mismatch");
      }
      advanced.t += 1;
      const double bc1 = 1.0 - std::pow(spec.beta1, static_cast<double>(advanced.t));
      const double bc2 = 1.0 - std::pow(spec.beta2, static_cast<double>(advanced.t));
      for (std::size_t i = 0; i < n; ++i) {
        const double g = pseudo_grad[i];
        advanced.m[i] = spec.beta1 * advanced.m[i] + (1.0 - spec.beta1) * g;
        advanced.v[i] = spec.beta2 * advanced.v[i] + (1.0 - spec.beta2) * g * g;
        const double m_hat = advanced.m[i] / bc1;
        const double v_hat = advanced.v[i] / bc2;
        next.values[i] -= spec.lr * m_hat / (std::sqrt(v_hat) + spec.epsilon);
      }
      break;
    }
  }
  return {std::move(next), std::move(advanced)};
}

}  // namespace pfl
