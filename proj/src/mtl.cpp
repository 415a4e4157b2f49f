#include "pfl/mtl.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "pfl/kernels.hpp"
#include "pfl/models.hpp"

namespace pfl {

namespace {

using Matrix = Eigen::MatrixXd;

Matrix to_matrix(const std::vector<double>& m, std::size_t k) {
  if (m.size() != k * k) throw std::invalid_argument("matrix buffer does not match its dimension");
  Matrix out(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m[i * k + j];
  }
  return out;
}

std::vector<double> from_matrix(const Matrix& m) {
  const auto k = static_cast<std::size_t>(m.rows());
  std::vector<double> out(k * k);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Ditto

void validate_ditto_config(const DittoConfig& cfg) {
  if (!(cfg.lambda >= 0.0)) throw ConfigError("ditto.lambda must be >= 0");
  if (!(cfg.personal_lr > 0.0)) throw ConfigError("ditto.personal_lr must be positive");
  if (cfg.personal_epochs < 0) throw ConfigError("ditto.personal_epochs must be >= 0");
}

DittoState ditto_round(const DittoState& state, const std::vector<const TrainingClient*>& participants,
                       const EngineConfig& cfg, const DittoConfig& dc, RoundTrace* trace) {
  const int round = state.global.next_round;
  const ModelParams& w = state.global.params;

  DittoState next;
  next.global = fedavg_round(state.global, participants, cfg, trace);
  next.personal = state.personal;

  std::vector<ModelParams> personal(participants.size());
  for (std::size_t i = 0; i < participants.size(); ++i) {
    const auto it = state.personal.find(participants[i]->client_id);
    personal[i] = it == state.personal.end() ? w : it->second;
  }
  GradientAdjust pull;
  if (dc.lambda != 0.0) {
    const double lambda = dc.lambda;
    pull = [&w, lambda](const ModelParams& v, std::span<double> grad) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += lambda * (v.values[i] - w.values[i]);
    };
  }
  parallel_for(participants.size(), cfg.workers, [&](std::size_t i) {
    Rng rng = client_rng(cfg.seed, "ditto_personal", round, participants[i]->client_id);
    local_sgd(personal[i], participants[i]->data, dc.personal_epochs, cfg.train_batch_size, dc.personal_lr, rng,
              pull);
  });
  for (std::size_t i = 0; i < participants.size(); ++i) {
    next.personal[participants[i]->client_id] = std::move(personal[i]);
  }
  return next;
}

DittoResult ditto_train(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                        const DittoConfig& dc, Regime regime) {
  if (regime != Regime::cross_silo) {
    throw ConfigError("ditto keeps per-client state and is only available in the cross_silo regime");
  }
  validate_engine_config(cfg);
  validate_ditto_config(dc);
  const std::vector<TrainingClient> pool = training_pool(ds);
  if (pool.empty()) throw std::invalid_argument("ditto: the dataset has no training clients");
  if (cfg.clients_per_round > pool.size()) throw ConfigError("clients_per_round exceeds the training clients");

  DittoResult result;
  result.state.global = initial_fedavg_state(arch, cfg);
  std::map<std::string, const TrainingClient*> by_id;
  for (const auto& c : pool) by_id[c.client_id] = &c;
  for (int round = 0; round < cfg.total_rounds; ++round) {
    std::vector<const TrainingClient*> participants;
    for (const auto& id : round_participants(pool, cfg, round)) participants.push_back(by_id.at(id));
    RoundTrace trace;
    result.state = ditto_round(result.state, participants, cfg, dc, &trace);
    result.traces.push_back(std::move(trace));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Mocha

void validate_mocha_config(const MochaConfig& cfg) {
  if (!(cfg.lambda >= 0.0)) throw ConfigError("mocha.lambda must be >= 0");
  if (cfg.outers < 1) throw ConfigError("mocha.outers must be >= 1");
  if (cfg.inner_epochs < 0) throw ConfigError("mocha.inner_epochs must be >= 0");
  if (!(cfg.lr > 0.0)) throw ConfigError("mocha.lr must be positive");
  if (cfg.batch_size == 0) throw ConfigError("mocha.batch_size must be positive");
}

MochaState initial_mocha_state(const std::vector<std::string>& client_ids, const ArchDescriptor& arch) {
  if (!is_linear_family(arch.family)) {
    throw ConfigError("mocha supports linear_regression and linear_svm only, got " +
                      std::string(to_string(arch.family)));
  }
  if (client_ids.empty()) throw std::invalid_argument("mocha: no clients");
  MochaState s;
  s.client_ids = client_ids;
  const std::size_t k = client_ids.size();
  s.models.assign(k, zero_params(arch));
  s.omega.assign(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) s.omega[i * k + i] = 1.0 / static_cast<double>(k);
  return s;
}

std::vector<double> pseudo_inverse_symmetric(const std::vector<double>& m, std::size_t k) {
  const Matrix a = to_matrix(m, k);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
  if (eig.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  const Eigen::VectorXd& vals = eig.eigenvalues();
  const double largest = vals.cwiseAbs().maxCoeff();
  const double tol = static_cast<double>(k) * std::numeric_limits<double>::epsilon() * largest;
  Eigen::VectorXd inv(vals.size());
  for (Eigen::Index i = 0; i < vals.size(); ++i) inv(i) = std::abs(vals(i)) > tol ? 1.0 / vals(i) : 0.0;
  const Matrix& v = eig.eigenvectors();
  return from_matrix(v * inv.asDiagonal() * v.transpose());
}

std::vector<double> omega_update(const std::vector<ModelParams>& models, const std::vector<double>& previous) {
  const std::size_t k = models.size();
  if (k == 0) throw std::invalid_argument("omega_update: no models");
  Matrix gram(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) {
      const double d = kernels::dot(models[i].values, models[j].values);
      gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
      gram(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d;
    }
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
  if (eig.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  // Gram eigenvalues at rounding level are zeroed before the root: their square
  // roots would survive as spurious O(sqrt(eps)) modes of omega.
  Eigen::VectorXd vals = eig.eigenvalues();
  const double floor = static_cast<double>(k) * std::numeric_limits<double>::epsilon() * vals.cwiseAbs().maxCoeff();
  for (Eigen::Index i = 0; i < vals.size(); ++i) vals(i) = vals(i) > floor ? vals(i) : 0.0;
  const Eigen::VectorXd root = vals.cwiseSqrt();
  const Matrix& v = eig.eigenvectors();
  Matrix sqrt_gram = v * root.asDiagonal() * v.transpose();
  sqrt_gram = 0.5 * (sqrt_gram + sqrt_gram.transpose());
  const double trace = sqrt_gram.trace();
  if (!(trace > 1e-300)) return previous;
  return from_matrix(sqrt_gram / trace);
}

MochaState mocha_round(const MochaState& state, const std::vector<ExampleRefs>& data, const EngineConfig& cfg,
                       const MochaConfig& mc) {
  const std::size_t k = state.models.size();
  if (data.size() != k) throw std::invalid_argument("mocha_round: data does not match the clients");
  const std::vector<double> omega_pinv = pseudo_inverse_symmetric(state.omega, k);

  MochaState next = state;
  const int round = state.next_round;
  for (int outer = 0; outer < mc.outers; ++outer) {
    const std::vector<ModelParams> snapshot = next.models;
    parallel_for(k, cfg.workers, [&](std::size_t c) {
      GradientAdjust couple;
      if (mc.lambda != 0.0) {
        // lambda * (W Omega^+)_{:,c}; the client's own column is live, the rest are the snapshot
        couple = [&, c](const ModelParams& current, std::span<double> grad) {
          for (std::size_t j = 0; j < k; ++j) {
            const double coef = mc.lambda * omega_pinv[j * k + c];
            if (coef == 0.0) continue;
            kernels::axpy(coef, j == c ? current.values : snapshot[j].values, grad);
          }
        };
      }
      Rng rng = client_rng(cfg.seed, "mocha", round * mc.outers + outer, next.client_ids[c]);
      local_sgd(next.models[c], data[c], mc.inner_epochs, mc.batch_size, mc.lr, rng, couple);
    });
  }
  if (mc.update_omega) next.omega = omega_update(next.models, state.omega);
  next.next_round = round + 1;
  return next;
}

MochaResult mocha_train(const FederatedDataset& ds, const ArchDescriptor& arch, const EngineConfig& cfg,
                        const MochaConfig& mc, Regime regime) {
  if (regime != Regime::cross_silo) {
    throw ConfigError("mocha keeps per-client state and is only available in the cross_silo regime");
  }
  validate_engine_config(cfg);
  validate_mocha_config(mc);
  const std::vector<TrainingClient> pool = training_pool(ds);
  std::vector<std::string> ids;
  std::vector<ExampleRefs> data;
  for (const auto& c : pool) {
    ids.push_back(c.client_id);
    data.push_back(c.data);
  }
  MochaResult result;
  result.state = initial_mocha_state(ids, arch);
  const auto p = static_cast<std::uint64_t>(result.state.models.front().size());
  for (int round = 0; round < cfg.total_rounds; ++round) {
    result.state = mocha_round(result.state, data, cfg, mc);
    RoundTrace trace;
    trace.round = round;
    trace.sampled_client_ids = ids;
    trace.params_broadcast = p * ids.size() * static_cast<std::uint64_t>(mc.outers);
    trace.params_uploaded = p * ids.size() * static_cast<std::uint64_t>(mc.outers);
    result.traces.push_back(std::move(trace));
  }
  return result;
}

}  // namespace pfl
