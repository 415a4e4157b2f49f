#pragma once

// Stateful multi-task algorithms for the cross-silo regime: Ditto (personal
// models pulled toward the FedAvg model) and primal Mocha (per-silo models
// coupled through a learned task-relationship matrix).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pfl/engine.hpp"
#include "pfl/types.hpp"

namespace pfl {

// ---------------------------------------------------------------------------
// Ditto

struct DittoConfig {
  double lambda = 0.1;
  double personal_lr = 0.1;
  int personal_epochs = 1;
};

void validate_ditto_config(const DittoConfig& cfg);

struct DittoState {
  FedAvgState global;
  /// Created from the broadcast global model at a client's first participation.
  std::map<std::string, ModelParams> personal;
};

/// One Ditto round: the global model advances exactly like FedAvg, then every
/// participant runs personal SGD on v with direction grad + lambda (v - w),
/// where w is the model broadcast this round.
DittoState ditto_round(const DittoState& state, const std::vector<const TrainingClient*>& participants,
                       const EngineConfig& cfg, const DittoConfig& dc, RoundTrace* trace);

struct DittoResult {
  DittoState state;
  std::vector<RoundTrace> traces;
};

/// Throws ConfigError unless `regime` is cross-silo.
DittoResult ditto_train(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                        const DittoConfig& dc, Regime regime);

// ---------------------------------------------------------------------------
// Mocha (primal)

struct MochaConfig {
  double lambda = 0.1;
  /// Local passes between two updates of omega.
  int outers = 1;
  int inner_epochs = 1;
  double lr = 0.1;
  std::size_t batch_size = 32;
  /// false keeps omega fixed at its initial value.
  bool update_omega = true;
};

void validate_mocha_config(const MochaConfig& cfg);

struct MochaState {
  std::vector<std::string> client_ids;
  /// Column k of W: client k's model.
  std::vector<ModelParams> models;
  /// K x K, row-major.
  std::vector<double> omega;
  int next_round = 0;
};

/// K zero-initialized linear models and omega = I / K.
MochaState initial_mocha_state(const std::vector<std::string>& client_ids, const ArchDescriptor& arch);

/// Moore-Penrose pseudo-inverse of a symmetric K x K matrix (row-major).
std::vector<double> pseudo_inverse_symmetric(const std::vector<double>& m, std::size_t k);

/// (W^T W)^{1/2} / tr((W^T W)^{1/2}); `previous` is returned when the trace
/// vanishes.
std::vector<double> omega_update(const std::vector<ModelParams>& models, const std::vector<double>& previous);

/// One round over every client; `data` is aligned with state.client_ids.
MochaState mocha_round(const MochaState& state, const std::vector<ExampleRefs>& data, const EngineConfig& cfg,
                       const MochaConfig& mc);

struct MochaResult {
  MochaState state;
  std::vector<RoundTrace> traces;
};

/// Trains on the train-tagged examples of every client for cfg.total_rounds.
/// Throws ConfigError for non-linear families or a cross-device regime.
MochaResult mocha_train(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                        const MochaConfig& mc, Regime regime);

}  // namespace pfl
