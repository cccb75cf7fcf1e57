// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/cbm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <json.hpp>

#include "mcbm/metrics.hpp"
#include "mcbm/npy.hpp"

namespace mcbm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kHoldoutStream = 0x484F4C44;  // "HOLD"
constexpr uint64_t kBatchStream = 0x43424C42;    // "CBLB"

void check_labels(std::span<const int64_t> labels, int64_t rows, int64_t num_classes) {
  if (static_cast<int64_t>(labels.size()) != rows) {
    throw ContractError("label count " + std::to_string(labels.size()) + " does not match " +
                        std::to_string(rows) + " rows");
  }
  for (int64_t y : labels) {
    if (y < 0 || y >= num_classes) throw ContractError("label out of range: " + std::to_string(y));
  }
}

// softmax(row) - onehot(label), written into out.
void residual(const double* logits, int64_t c, int64_t label, double* out) {
  double mx = logits[0];
  for (int64_t r = 1; r < c; ++r) mx = std::max(mx, logits[r]);
  double sum = 0.0;
  for (int64_t r = 0; r < c; ++r) {
    out[r] = std::exp(logits[r] - mx);
    sum += out[r];
  }
  for (int64_t r = 0; r < c; ++r) out[r] /= sum;
  out[label] -= 1.0;
}

Mat head_logits(const Mat& z, const Mat& w, const Vec& b) {
  Mat out(z.rows(), w.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index r = 0; r < w.cols(); ++r) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < z.cols(); ++k) acc += z(i, k) * w(k, r);
      out(i, r) = acc + b[r];
    }
  }
  return out;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("missing file " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

}  // namespace

// ---------------------------------------------------------------- CBL

CblTargets make_cbl_targets(const AnnotationStore& store, int64_t num_samples,
                            int64_t num_concepts) {
  CblTargets t;
  t.labels = Mat::Zero(num_samples, num_concepts);
  t.mask = Mask::Constant(num_samples, num_concepts, false);
  for (const Annotation& a : store.triples()) {
    if (a.sample < 0 || a.sample >= num_samples || a.concept_id < 0 ||
        a.concept_id >= num_concepts) {
      throw ValidationError("annotation (" + std::to_string(a.sample) + ", " +
                            std::to_string(a.concept_id) + ") is out of range");
    }
    t.labels(a.sample, a.concept_id) = a.label;
    t.mask(a.sample, a.concept_id) = true;
  }
  t.pos_weight = positive_weights(t);
  return t;
}

Vec positive_weights(const CblTargets& targets) {
  Vec w = Vec::Ones(targets.mask.cols());
  for (Eigen::Index k = 0; k < targets.mask.cols(); ++k) {
    double pos = 0.0;
    double neg = 0.0;
    for (Eigen::Index i = 0; i < targets.mask.rows(); ++i) {
      if (!targets.mask(i, k)) continue;
      (targets.labels(i, k) > 0.5 ? pos : neg) += 1.0;
    }
    if (pos > 0.0 && neg > 0.0) w[k] = neg / pos;
  }
  return w;
}

double cbl_loss_and_grads(const CblModel& model, const Mat& features, const CblTargets& targets,
                          CblGrads* grads) {
  const Mat s = concept_logits(model, features);
  if (targets.mask.rows() != s.rows() || targets.mask.cols() != s.cols() ||
      targets.labels.rows() != s.rows() || targets.labels.cols() != s.cols() ||
      targets.pos_weight.size() != s.cols()) {
    throw ContractError("cbl_loss_and_grads: target shape mismatch");
  }
  Mat g = Mat::Zero(s.rows(), s.cols());
  double loss = 0.0;
  int64_t count = 0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    for (Eigen::Index k = 0; k < s.cols(); ++k) {
      if (!targets.mask(i, k)) continue;
      ++count;
      const double v = s(i, k);
      if (targets.labels(i, k) > 0.5) {
        const double w = targets.pos_weight[k];
        loss += w * softplus(-v);
        g(i, k) = w * (sigmoid(v) - 1.0);
      } else {
        loss += softplus(v);
        g(i, k) = sigmoid(v);
      }
    }
  }
  if (count == 0) {
    if (grads) {
      grads->weights = Mat::Zero(model.weights.rows(), model.weights.cols());
      grads->bias = Vec::Zero(model.bias.size());
    }
    return 0.0;
  }
  const double inv = 1.0 / static_cast<double>(count);
  if (grads) {
    g *= inv;
    grads->weights = features.transpose() * g;
    grads->bias = g.colwise().sum().transpose();
  }
  return loss * inv;
}

Mat concept_logits(const CblModel& cbl, const Mat& features) {
  if (features.cols() != cbl.weights.rows()) {
    throw ContractError("concept_logits: features have width " + std::to_string(features.cols()) +
                        " but the CBL expects " + std::to_string(cbl.weights.rows()));
  }
  Mat out = features * cbl.weights;
  out.rowwise() += cbl.bias.transpose();
  return out;
}

CblTrainResult train_cbl(const Mat& features, const AnnotationStore& store, int64_t num_concepts,
                         const CblTrainConfig& config) {
  const int64_t n_samples = features.rows();
  CblTargets all = make_cbl_targets(store, n_samples, num_concepts);
  CblTrainResult result;
  CblModel& model = result.model;

  for (int64_t k = 0; k < num_concepts; ++k) {
    int64_t pos = 0;
    int64_t neg = 0;
    for (int64_t i = 0; i < n_samples; ++i) {
      if (all.mask(i, k)) (all.labels(i, k) > 0.5 ? pos : neg) += 1;
    }
    if (pos == 0 || neg == 0) {
      model.dropped.push_back(k);
      all.mask.col(k).setConstant(false);
      result.warnings.push_back("concept " + std::to_string(k) + " dropped: " +
                                std::to_string(pos) + " positive and " + std::to_string(neg) +
                                " negative annotations");
    }
  }

  std::vector<std::pair<int64_t, int64_t>> omega;
  for (int64_t i = 0; i < n_samples; ++i) {
    for (int64_t k = 0; k < num_concepts; ++k) {
      if (all.mask(i, k)) omega.emplace_back(i, k);
    }
  }
  if (omega.empty()) throw ValidationError("no usable concept annotations to train the CBL");

  std::mt19937_64 split_rng(derive_seed(config.seed, kHoldoutStream));
  std::shuffle(omega.begin(), omega.end(), split_rng);
  const size_t n_hold =
      omega.size() >= 2 ? std::max<size_t>(1, static_cast<size_t>(std::ceil(config.holdout *
                                                                             omega.size())))
                        : 0;
  CblTargets train = all;
  CblTargets hold = all;
  hold.mask.setConstant(false);
  for (size_t p = 0; p < n_hold; ++p) {
    train.mask(omega[p].first, omega[p].second) = false;
    hold.mask(omega[p].first, omega[p].second) = true;
  }
  train.pos_weight = positive_weights(train);
  hold.pos_weight = train.pos_weight;

  std::vector<int64_t> rows;
  for (int64_t i = 0; i < n_samples; ++i) {
    if (train.mask.row(i).any()) rows.push_back(i);
  }

  model.weights = Mat::Zero(features.cols(), num_concepts);
  model.bias = Vec::Zero(num_concepts);
  AdamState adam_w = AdamState::like(model.weights);
  AdamState adam_b = AdamState::like(model.bias);
  CblModel best = model;
  double best_loss = std::numeric_limits<double>::infinity();
  int64_t since_best = 0;
  std::mt19937_64 batch_rng(derive_seed(config.seed, kBatchStream));
  const int64_t bs = config.batch_size > 0 ? config.batch_size : static_cast<int64_t>(rows.size());

  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(rows.begin(), rows.end(), batch_rng);
    for (size_t start = 0; start < rows.size(); start += static_cast<size_t>(bs)) {
      const size_t end = std::min(rows.size(), start + static_cast<size_t>(bs));
      const Eigen::Index b = static_cast<Eigen::Index>(end - start);
      Mat xb(b, features.cols());
      CblTargets tb;
      tb.labels.resize(b, num_concepts);
      tb.mask.resize(b, num_concepts);
      tb.pos_weight = train.pos_weight;
      for (Eigen::Index r = 0; r < b; ++r) {
        const int64_t i = rows[start + static_cast<size_t>(r)];
        xb.row(r) = features.row(i);
        tb.labels.row(r) = train.labels.row(i);
        tb.mask.row(r) = train.mask.row(i);
      }
      CblGrads g;
      const double loss = cbl_loss_and_grads(model, xb, tb, &g);
      if (!std::isfinite(loss)) throw NumericError("CBL loss became non-finite");
      adam_update(model.weights, g.weights, adam_w, config.lr);
      adam_update(model.bias, g.bias, adam_b, config.lr);
    }
    const double train_loss = cbl_loss_and_grads(model, features, train, nullptr);
    const double hold_loss =
        n_hold > 0 ? cbl_loss_and_grads(model, features, hold, nullptr) : train_loss;
    result.history.emplace_back(train_loss, hold_loss);
    if (hold_loss < best_loss) {
      best_loss = hold_loss;
      best = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  std::vector<int64_t> dropped = model.dropped;
  model = best;
  model.dropped = dropped;
  for (int64_t k : model.dropped) {
    model.weights.col(k).setZero();
    model.bias[k] = 0.0;
  }
  return result;
}

// ---------------------------------------------------------------- sparse head

Mat SparseHead::logits(const Mat& z) const {
  if (z.cols() != weights.rows()) throw ContractError("head input width mismatch");
  return head_logits(z, weights, bias);
}

double elastic_net_objective(const Mat& x, std::span<const int64_t> labels, const Mat& weights,
                             const Vec& bias, double lambda, double alpha) {
  const Mat logits = head_logits(x, weights, bias);
  double ce = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    ce += softmax_cross_entropy(std::span<const double>(logits.row(i).data(), logits.cols()),
                                labels[static_cast<size_t>(i)]);
  }
  ce /= static_cast<double>(logits.rows());
  return ce + lambda * ((1.0 - alpha) * 0.5 * weights.squaredNorm() +
                        alpha * weights.cwiseAbs().sum());
}

namespace {

Vec prior_bias(std::span<const int64_t> labels, int64_t num_classes) {
  Vec counts = Vec::Zero(num_classes);
  for (int64_t y : labels) counts[y] += 1.0;
  Vec b(num_classes);
  const double n = static_cast<double>(labels.size());
  for (int64_t r = 0; r < num_classes; ++r) {
    b[r] = std::log(counts[r] > 0.0 ? counts[r] / n : 0.5 / n);
  }
  return b;
}

Mat residuals(const Mat& x, std::span<const int64_t> labels, const Mat& w, const Vec& b) {
  const Mat logits = head_logits(x, w, b);
  Mat r(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    residual(logits.row(i).data(), logits.cols(), labels[static_cast<size_t>(i)], r.row(i).data());
  }
  return r;
}

}  // namespace

double lambda_max(const Mat& x, std::span<const int64_t> labels, int64_t num_classes,
                  double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("lambda_max needs alpha in (0, 1]");
  check_labels(labels, x.rows(), num_classes);
  const Mat r = residuals(x, labels, Mat::Zero(x.cols(), num_classes),
                          prior_bias(labels, num_classes));
  const Mat g = x.transpose() * r / static_cast<double>(x.rows());
  const double gmax = g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
  return gmax / alpha * (1.0 + 1e-9);
}

SparseHead fit_sparse_head(const Mat& x, std::span<const int64_t> labels, int64_t num_classes,
                           double lambda, double alpha, const SolverConfig& config,
                           const SparseHead* warm, const std::vector<bool>* excluded) {
  if (alpha < 0.0 || alpha > 1.0) throw ContractError("alpha must lie in [0, 1]");
  if (lambda < 0.0) throw ContractError("lambda must be non-negative");
  if (x.rows() == 0) throw ContractError("fit_sparse_head: empty design matrix");
  check_labels(labels, x.rows(), num_classes);
  const Eigen::Index n = x.rows();
  const Eigen::Index k = x.cols();
  const Eigen::Index c = num_classes;
  if (excluded && static_cast<Eigen::Index>(excluded->size()) != k) {
    throw ContractError("excluded mask must have one entry per concept");
  }

  SparseHead head;
  head.lambda = lambda;
  head.alpha = alpha;
  if (warm) {
    if (warm->weights.rows() != k || warm->weights.cols() != c) {
      throw ContractError("warm start has the wrong shape");
    }
    head.weights = warm->weights;
    head.bias = warm->bias;
  } else {
    head.weights = Mat::Zero(k, c);
    head.bias = prior_bias(labels, num_classes);
  }
  auto zero_excluded = [&](Mat& w) {
    if (!excluded) return;
    for (Eigen::Index j = 0; j < k; ++j) {
      if ((*excluded)[static_cast<size_t>(j)]) w.row(j).setZero();
    }
  };
  zero_excluded(head.weights);

  const double l2 = lambda * (1.0 - alpha);
  const double l1 = lambda * alpha;
  const double lip = x.rowwise().squaredNorm().maxCoeff() + 1.0 + l2;
  const double eta = config.step_scale / lip;
  const double inv_n = 1.0 / static_cast<double>(n);

  Mat table = residuals(x, labels, head.weights, head.bias);
  Mat grad_w = x.transpose() * table * inv_n;
  Vec grad_b = table.colwise().sum().transpose() * inv_n;

  const double f0 = elastic_net_objective(x, labels, head.weights, head.bias, lambda, alpha);
  double f_prev = f0;
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  Vec logit(c);
  Vec r(c);
  Vec d(c);

  for (int64_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int64_t j : order) {
      for (Eigen::Index q = 0; q < c; ++q) {
        double acc = 0.0;
        for (Eigen::Index p = 0; p < k; ++p) acc += x(j, p) * head.weights(p, q);
        logit[q] = acc + head.bias[q];
      }
      residual(logit.data(), c, labels[static_cast<size_t>(j)], r.data());
      d = r - table.row(j).transpose();
      for (Eigen::Index p = 0; p < k; ++p) {
        const double xp = x(j, p);
        for (Eigen::Index q = 0; q < c; ++q) {
          double& w = head.weights(p, q);
          const double step = xp * d[q] + grad_w(p, q) + l2 * w;
          w = soft_threshold(w - eta * step, eta * l1);
        }
      }
      zero_excluded(head.weights);
      head.bias -= eta * (d + grad_b);
      grad_w.noalias() += x.row(j).transpose() * d.transpose() * inv_n;
      grad_b += d * inv_n;
      table.row(j) = r.transpose();
    }
    head.epochs = epoch + 1;
    const double f = elastic_net_objective(x, labels, head.weights, head.bias, lambda, alpha);
    if (!std::isfinite(f) || f > 10.0 * f0) {
      throw NumericError("sparse head solver diverged (objective " + std::to_string(f) +
                         " from " + std::to_string(f0) + "); try a smaller step_scale");
    }
    head.objective = f;
    if (std::abs(f_prev - f) <= config.tol * std::max(std::abs(f_prev), 1e-300)) {
      head.converged = true;
      break;
    }
    f_prev = f;
  }
  if (head.epochs == 0) head.objective = f0;
  return head;
}

const char* status_name(TargetStatus s) {
  switch (s) {
    case TargetStatus::kHit:
      return "hit";
    case TargetStatus::kNearest:
      return "nearest";
    case TargetStatus::kInfeasible:
      return "infeasible";
  }
  return "unknown";
}

SweepResult sweep_to_ncc(const Mat& x_fit, std::span<const int64_t> y_fit, const Mat& x_eval,
                         std::span<const int64_t> y_eval, int64_t num_classes,
                         const SweepConfig& config, const std::vector<bool>* excluded) {
  if (!std::is_sorted(config.targets.begin(), config.targets.end())) {
    throw ContractError("NCC targets must be ascending");
  }
  if (config.grid_points < 2) throw ContractError("lambda grid needs at least two points");
  check_labels(y_eval, x_eval.rows(), num_classes);

  SweepResult result;
  result.lambda_max = lambda_max(x_fit, y_fit, num_classes, config.alpha);
  auto evaluate = [&](const SparseHead& head, double lambda) {
    SweepPoint p;
    p.lambda = lambda;
    p.ncc = ncc(x_eval, head.weights, config.tau);
    p.accuracy = accuracy(argmax_rows(head.logits(x_eval)), y_eval);
    p.nec = nec(head.weights);
    return p;
  };

  std::vector<SparseHead> heads;
  for (int64_t g = 0; g < config.grid_points; ++g) {
    const double lambda =
        result.lambda_max *
        std::pow(10.0, -config.decades * static_cast<double>(g) /
                           static_cast<double>(config.grid_points - 1));
    heads.push_back(fit_sparse_head(x_fit, y_fit, num_classes, lambda, config.alpha,
                                    config.solver, heads.empty() ? nullptr : &heads.back(),
                                    excluded));
    result.grid.push_back(evaluate(heads.back(), lambda));
  }

  for (double target : config.targets) {
    TargetResult tr;
    tr.target = target;
    // Weakest regularization within tolerance, else the nearest grid point.
    std::optional<size_t> within;
    size_t best = 0;
    for (size_t g = 0; g < result.grid.size(); ++g) {
      const double gap = std::abs(result.grid[g].ncc - target);
      if (gap <= config.tolerance) within = g;
      if (gap < std::abs(result.grid[best].ncc - target)) best = g;
    }
    if (within) {
      tr.point = result.grid[*within];
      tr.head = heads[*within];
      tr.status = TargetStatus::kHit;
      result.targets.push_back(std::move(tr));
      continue;
    }
    tr.point = result.grid[best];
    tr.head = heads[best];
    std::optional<size_t> bracket;
    for (size_t g = 0; g + 1 < result.grid.size(); ++g) {
      if ((result.grid[g].ncc - target) * (result.grid[g + 1].ncc - target) < 0.0) {
        bracket = g;
        break;
      }
    }
    if (!bracket) {
      tr.status = TargetStatus::kInfeasible;
      result.targets.push_back(std::move(tr));
      continue;
    }
    SweepPoint lo = result.grid[*bracket];
    SweepPoint hi = result.grid[*bracket + 1];
    SparseHead lo_head = heads[*bracket];
    tr.status = TargetStatus::kNearest;
    for (int64_t step = 0; step < config.max_bisections; ++step) {
      const double lambda = std::sqrt(lo.lambda * hi.lambda);
      SparseHead mid_head = fit_sparse_head(x_fit, y_fit, num_classes, lambda, config.alpha,
                                            config.solver, &lo_head, excluded);
      const SweepPoint mid = evaluate(mid_head, lambda);
      tr.bisection_steps = step + 1;
      if (std::abs(mid.ncc - target) < std::abs(tr.point.ncc - target)) {
        tr.point = mid;
        tr.head = mid_head;
      }
      if (std::abs(mid.ncc - target) <= config.tolerance) {
        tr.status = TargetStatus::kHit;
        break;
      }
      if ((lo.ncc - target) * (mid.ncc - target) < 0.0) {
        hi = mid;
      } else {
        lo = mid;
        lo_head = std::move(mid_head);
      }
    }
    result.targets.push_back(std::move(tr));
  }
  double sum = 0.0;
  for (const TargetResult& t : result.targets) sum += t.point.accuracy;
  result.avg_accuracy =
      result.targets.empty() ? 0.0 : sum / static_cast<double>(result.targets.size());
  return result;
}

// ---------------------------------------------------------------- model + IO

Mat CbmModel::normalized_logits(const Mat& features) const {
  return zscore_apply(concept_logits(cbl, features), head.z_stats);
}

Mat CbmModel::class_logits(const Mat& features) const {
  return head.logits(normalized_logits(features));
}

void save_cbl(const CblModel& cbl, const fs::path& dir) {
  fs::create_directories(dir);
  npy::write_tensor(dir / "weights.npy", from_matrix(cbl.weights));
  npy::write_tensor(dir / "bias.npy", from_vector(cbl.bias));
  write_text(dir / "cbl.json", json{{"input_dim", cbl.weights.rows()},
                                    {"num_concepts", cbl.weights.cols()},
                                    {"weights", "weights.npy"},
                                    {"bias", "bias.npy"},
                                    {"dropped", cbl.dropped}}
                                   .dump(2) +
                                   "\n");
}

CblModel load_cbl(const fs::path& dir) {
  CblModel cbl;
  try {
    const json meta = json::parse(read_text(dir / "cbl.json"));
    cbl.weights = to_matrix(npy::read_tensor(dir / meta.at("weights").get<std::string>()));
    cbl.bias = to_vector(npy::read_tensor(dir / meta.at("bias").get<std::string>()));
    cbl.dropped = meta.value("dropped", std::vector<int64_t>{});
  } catch (const json::exception& e) {
    throw ValidationError("malformed " + (dir / "cbl.json").string() + ": " + e.what());
  }
  if (cbl.bias.size() != cbl.weights.cols()) throw ValidationError("CBL bias/weights mismatch");
  return cbl;
}

void save_head(const SparseHead& head, const fs::path& dir) {
  fs::create_directories(dir);
  npy::write_tensor(dir / "weights.npy", from_matrix(head.weights));
  npy::write_tensor(dir / "bias.npy", from_vector(head.bias));
  write_text(dir / "head.json", json{{"num_concepts", head.weights.rows()},
                                     {"num_classes", head.weights.cols()},
                                     {"weights", "weights.npy"},
                                     {"bias", "bias.npy"},
                                     {"lambda", head.lambda},
                                     {"alpha", head.alpha},
                                     {"z_mean", head.z_stats.mean},
                                     {"z_std", head.z_stats.std},
                                     {"epochs", head.epochs},
                                     {"converged", head.converged},
                                     {"objective", head.objective}}
                                    .dump(2) +
                                    "\n");
}

SparseHead load_head(const fs::path& dir) {
  SparseHead head;
  try {
    const json meta = json::parse(read_text(dir / "head.json"));
    head.weights = to_matrix(npy::read_tensor(dir / meta.at("weights").get<std::string>()));
    head.bias = to_vector(npy::read_tensor(dir / meta.at("bias").get<std::string>()));
    head.lambda = meta.at("lambda").get<double>();
    head.alpha = meta.at("alpha").get<double>();
    head.z_stats.mean = meta.at("z_mean").get<std::vector<double>>();
    head.z_stats.std = meta.at("z_std").get<std::vector<double>>();
    head.epochs = meta.value("epochs", int64_t{0});
    head.converged = meta.value("converged", false);
    head.objective = meta.value("objective", 0.0);
  } catch (const json::exception& e) {
    throw ValidationError("malformed " + (dir / "head.json").string() + ": " + e.what());
  }
  if (head.bias.size() != head.weights.cols() ||
      static_cast<Eigen::Index>(head.z_stats.mean.size()) != head.weights.rows()) {
    throw ValidationError("head dimensions in " + dir.string() + " are inconsistent");
  }
  return head;
}

}  // namespace mcbm
