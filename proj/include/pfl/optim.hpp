#pragma once

// Client SGD and the server optimizers of generalized FedAvg.
//
// Server optimizers consume a pseudo-gradient: the negated weighted mean of
// client deltas (client_final - client_start). With kind=avg and lr=1 the
// server step reproduces plain model averaging.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "pfl/types.hpp"

namespace pfl {

enum class ServerOptKind { avg, adam, fedavgm };

std::string_view to_string(ServerOptKind k);
ServerOptKind parse_server_opt_kind(std::string_view s);

/// Hyperparameters of a server optimizer; the running state lives in ServerOptState.
struct ServerOptSpec {
  ServerOptKind kind = ServerOptKind::avg;
  double lr = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-3;
  double momentum = 0.9;

  bool operator==(const ServerOptSpec&) const = default;
};

struct ServerOptState {
  ServerOptSpec spec;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t t = 0;
  std::vector<double> buffer;

  bool operator==(const ServerOptState&) const = default;
};

/// Fresh state with zeroed moment/momentum buffers of `model_size`.
ServerOptState make_server_state(const ServerOptSpec& spec, std::size_t model_size);

/// values - lr * grad. Throws on length mismatch or nonpositive lr.
ModelParams sgd_step(const ModelParams& params, std::span<const double> grad, double lr);

/// In-place form used in the hot loops.
void sgd_step_inplace(std::span<double> values, std::span<const double> grad, double lr);

/// Returns the updated model and the advanced state; inputs are untouched.
std::pair<ModelParams, ServerOptState> server_apply(const ServerOptState& state, const ModelParams& current,
                                                    std::span<const double> pseudo_grad);

}  // namespace pfl
