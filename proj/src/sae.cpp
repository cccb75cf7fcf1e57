// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/sae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "mcbm/metrics.hpp"
#include "mcbm/npy.hpp"
#include "mcbm/numerics.hpp"

namespace mcbm {

namespace fs = std::filesystem;

void SAEParams::check() const {
  const auto n = encoder_weights.rows();
  const auto m = encoder_weights.cols();
  if (n < 1 || m < 1 || encoder_bias.size() != m || decoder_weights.rows() != m ||
      decoder_weights.cols() != n || decoder_bias.size() != n) {
    throw ContractError("inconsistent SAE parameter shapes");
  }
}

SAEParams init_sae(int64_t n, int64_t m, uint64_t seed) {
  if (n < 1 || m < 1) throw ContractError("init_sae: dimensions must be positive");
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(n));
  std::uniform_real_distribution<double> dist(-bound, bound);
  SAEParams p;
  p.encoder_weights.resize(n, m);
  for (Eigen::Index i = 0; i < p.encoder_weights.size(); ++i) p.encoder_weights.data()[i] = dist(rng);
  p.decoder_weights.resize(m, n);
  for (Eigen::Index i = 0; i < p.decoder_weights.size(); ++i) p.decoder_weights.data()[i] = dist(rng);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double norm = p.decoder_weights.row(j).norm();
    if (norm > 0.0) p.decoder_weights.row(j) /= norm;
  }
  p.encoder_bias = Vec::Zero(m);
  p.decoder_bias = Vec::Zero(n);
  return p;
}

namespace {

Mat preactivation(const SAEParams& p, const Mat& a) {
  Mat centered = a.rowwise() - p.decoder_bias.transpose();
  Mat pre = centered * p.encoder_weights;
  pre.rowwise() += p.encoder_bias.transpose();
  return pre;
}

void check_width(const SAEParams& p, const Mat& a) {
  if (a.cols() != p.input_dim()) {
    throw ContractError("SAE input has " + std::to_string(a.cols()) + " columns, expected " +
                        std::to_string(p.input_dim()));
  }
}

Mat decode(const SAEParams& p, const Mat& h) {
  Mat out = h * p.decoder_weights;
  out.rowwise() += p.decoder_bias.transpose();
  return out;
}

double mean_l0(const Mat& h) {
  if (h.rows() == 0) return 0.0;
  int64_t nz = 0;
  for (Eigen::Index i = 0; i < h.size(); ++i) nz += h.data()[i] > 0.0;
  return static_cast<double>(nz) / static_cast<double>(h.rows());
}

Mat gather_rows(const Mat& src, std::span<const int64_t> ids) {
  Mat out(static_cast<Eigen::Index>(ids.size()), src.cols());
  for (size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(ids[i]);
  return out;
}

double mean_ce(const Mat& logits, std::span<const int64_t> labels) {
  double sum = 0.0;
  std::vector<double> row(static_cast<size_t>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) row[static_cast<size_t>(j)] = logits(i, j);
    sum += softmax_cross_entropy(row, labels[static_cast<size_t>(i)]);
  }
  return sum / static_cast<double>(logits.rows());
}

double ratio_or_zero(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

Mat sae_encode(const SAEParams& params, const Mat& a) {
  check_width(params, a);
  return preactivation(params, a).cwiseMax(0.0);
}

SaeForward sae_forward(const SAEParams& params, const Mat& a) {
  SaeForward f;
  f.hidden = sae_encode(params, a);
  f.reconstruction = decode(params, f.hidden);
  return f;
}

SaeLoss sae_loss_and_grads(const SAEParams& p, const Mat& batch, double lambda_sae,
                           SaeGrads* grads) {
  check_width(p, batch);
  const auto b = static_cast<double>(batch.rows());
  if (batch.rows() == 0) throw ContractError("sae_loss_and_grads: empty batch");

  const Mat centered = batch.rowwise() - p.decoder_bias.transpose();
  Mat pre = centered * p.encoder_weights;
  pre.rowwise() += p.encoder_bias.transpose();
  const Mat h = pre.cwiseMax(0.0);
  Mat recon = h * p.decoder_weights;
  recon.rowwise() += p.decoder_bias.transpose();
  const Mat resid = recon - batch;

  SaeLoss loss;
  loss.recon = resid.squaredNorm() / b;
  loss.penalty = lambda_sae * h.sum() / b;
  loss.total = loss.recon + loss.penalty;
  if (!grads) return loss;

  const Mat d_recon = resid * (2.0 / b);
  grads->decoder_weights = h.transpose() * d_recon;
  Vec d_bias = d_recon.colwise().sum().transpose();

  Mat d_pre = d_recon * p.decoder_weights.transpose();
  d_pre.array() += lambda_sae / b;
  d_pre = (pre.array() > 0.0).select(d_pre, 0.0);

  grads->encoder_weights = centered.transpose() * d_pre;
  grads->encoder_bias = d_pre.colwise().sum().transpose();
  d_bias -= p.encoder_weights * grads->encoder_bias;
  grads->decoder_bias = std::move(d_bias);
  return loss;
}

SaeTrainResult train_sae(const Mat& train, const Mat& val, const SaeTrainConfig& cfg) {
  if (train.rows() == 0 || val.rows() == 0) throw ContractError("train_sae: empty split");
  if (!(cfg.lambda_sae > 0.0)) throw ContractError("train_sae: lambda_sae must be positive");
  if (cfg.patience < 1) throw ContractError("train_sae: patience must be >= 1");
  if (cfg.batch_size < 1) throw ContractError("train_sae: batch_size must be >= 1");
  if (val.cols() != train.cols()) throw ContractError("train_sae: split widths differ");

  const int64_t n = train.cols();
  const int64_t m = cfg.hidden_dim > 0 ? cfg.hidden_dim : n;
  SAEParams p = init_sae(n, m, cfg.seed);
  AdamState s_we = AdamState::like(p.encoder_weights);
  AdamState s_be = AdamState::like(p.encoder_bias);
  AdamState s_wd = AdamState::like(p.decoder_weights);
  AdamState s_bd = AdamState::like(p.decoder_bias);

  std::mt19937_64 rng(cfg.seed ^ 0x5AE5AE5AE5AEULL);
  std::vector<int64_t> order(static_cast<size_t>(train.rows()));
  std::iota(order.begin(), order.end(), int64_t{0});

  SaeTrainResult result;
  result.params = p;
  double best = std::numeric_limits<double>::infinity();
  int64_t since_best = 0;
  SaeGrads g;

  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double train_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      const Mat batch = gather_rows(train, std::span(order).subspan(start, stop - start));
      const SaeLoss l = sae_loss_and_grads(p, batch, cfg.lambda_sae, &g);
      if (!std::isfinite(l.total)) {
        std::ostringstream os;
        os << "SAE loss became non-finite at epoch " << epoch << ", batch starting at " << start
           << " (recon " << l.recon << ", penalty " << l.penalty
           << "); try a smaller learning rate";
        throw NumericError(os.str());
      }
      train_sum += l.total * static_cast<double>(stop - start);
      adam_update(p.encoder_weights, g.encoder_weights, s_we, cfg.lr);
      adam_update(p.encoder_bias, g.encoder_bias, s_be, cfg.lr);
      adam_update(p.decoder_weights, g.decoder_weights, s_wd, cfg.lr);
      adam_update(p.decoder_bias, g.decoder_bias, s_bd, cfg.lr);
    }

    const SaeLoss vl = sae_loss_and_grads(p, val, cfg.lambda_sae, nullptr);
    if (!std::isfinite(vl.total)) {
      throw NumericError("SAE validation loss became non-finite at epoch " + std::to_string(epoch));
    }
    SaeEpoch rec;
    rec.epoch = epoch;
    rec.train_loss = train_sum / static_cast<double>(train.rows());
    rec.val_loss = vl.total;
    rec.val_recon_l2 = vl.recon;
    rec.val_avg_l0 = mean_l0(sae_encode(p, val));
    result.history.push_back(rec);

    if (vl.total < best) {
      best = vl.total;
      since_best = 0;
      result.params = p;
      result.best_epoch = epoch;
    } else if (++since_best >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

double black_box_loss(const LinearHead& head, const Mat& x, std::span<const int64_t> labels) {
  if (static_cast<size_t>(x.rows()) != labels.size()) {
    throw ContractError("black_box_loss: label count mismatch");
  }
  return mean_ce(head.logits(x), labels);
}

SAEMetrics recovered_metrics(const Mat& a, const Mat& a_hat, std::span<const int64_t> labels,
                             const LinearHead& head) {
  if (a.rows() != a_hat.rows() || a.cols() != a_hat.cols()) {
    throw ContractError("recovered_metrics: reconstruction shape differs from input");
  }
  if (head.weights.rows() != a.cols()) {
    throw ContractError("recovered_metrics: head expects " + std::to_string(head.weights.rows()) +
                        " features, got " + std::to_string(a.cols()));
  }
  SAEMetrics m;
  m.recon_l2 = (a - a_hat).squaredNorm() / static_cast<double>(a.rows());
  m.loss_original = black_box_loss(head, a, labels);
  m.loss_reconstructed = black_box_loss(head, a_hat, labels);
  m.loss_zero = black_box_loss(head, Mat::Zero(a.rows(), a.cols()), labels);
  if (m.loss_zero == m.loss_original) {
    throw ValidationError("recovered loss undefined: L_BB(0) equals L_BB(a)");
  }
  m.recovered_loss =
      1.0 - (m.loss_reconstructed - m.loss_original) / (m.loss_zero - m.loss_original);

  const auto pred_a = argmax_rows(head.logits(a));
  const auto pred_hat = argmax_rows(head.logits(a_hat));
  m.recovered_accuracy = ratio_or_zero(accuracy(pred_hat, labels), accuracy(pred_a, labels));
  m.recovered_balanced_accuracy =
      ratio_or_zero(balanced_accuracy(pred_hat, labels), balanced_accuracy(pred_a, labels));
  return m;
}

SAEMetrics sae_metrics(const SAEParams& params, const Mat& features,
                       std::span<const int64_t> labels, const LinearHead& head,
                       const std::vector<bool>* keep) {
  Mat h = sae_encode(params, features);
  if (keep) {
    if (static_cast<int64_t>(keep->size()) != params.hidden_dim()) {
      throw ContractError("sae_metrics: keep mask length differs from hidden size");
    }
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      if (!(*keep)[static_cast<size_t>(j)]) h.col(j).setZero();
    }
  }
  SAEMetrics m = recovered_metrics(features, decode(params, h), labels, head);
  m.avg_l0 = mean_l0(h);
  return m;
}

DensityHistogram density_histogram(const SAEParams& params, const Mat& features, int64_t bins) {
  if (bins < 1) throw ContractError("density_histogram: bins must be positive");
  DensityHistogram d;
  d.num_samples = features.rows();
  d.counts.assign(static_cast<size_t>(params.hidden_dim()), 0);
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index start = 0; start < features.rows(); start += kChunk) {
    const Eigen::Index len = std::min(kChunk, features.rows() - start);
    const Mat h = sae_encode(params, features.middleRows(start, len));
    for (Eigen::Index i = 0; i < h.rows(); ++i) {
      for (Eigen::Index j = 0; j < h.cols(); ++j) d.counts[static_cast<size_t>(j)] += h(i, j) > 0.0;
    }
  }
  const double nn = static_cast<double>(std::max<int64_t>(d.num_samples, 1));
  const double lo = std::log10(1.0 / nn);
  const double hi = std::log10((nn + 1.0) / nn);
  d.bin_edges.resize(static_cast<size_t>(bins + 1));
  for (int64_t b = 0; b <= bins; ++b) {
    d.bin_edges[static_cast<size_t>(b)] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  }
  d.bin_counts.assign(static_cast<size_t>(bins), 0);
  for (int64_t c : d.counts) {
    if (c == 0) ++d.dead;
    const double v = std::log10((static_cast<double>(c) + 1.0) / nn);
    auto b = static_cast<int64_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    b = std::clamp<int64_t>(b, 0, bins - 1);
    ++d.bin_counts[static_cast<size_t>(b)];
  }
  return d;
}

PruneResult prune(const SAEParams& params, std::span<const int64_t> counts, const Mat& features,
                  std::span<const int64_t> labels, const LinearHead& head, double tolerance) {
  const int64_t m = params.hidden_dim();
  if (static_cast<int64_t>(counts.size()) != m) throw ContractError("prune: one count per unit");
  if (tolerance < 0.0) throw ContractError("prune: negative tolerance");

  const Mat h = sae_encode(params, features);
  const SAEMetrics base = recovered_metrics(features, decode(params, h), labels, head);

  // Masking a unit removes h_j * (W_D W_head)_j from the head logits, so the
  // cutoff sweep only needs rank-one logit updates.
  const Mat unit_logits = params.decoder_weights * head.weights;  // m x C
  Mat logits = head.logits(decode(params, h));
  const double l_a = base.loss_original;
  const double l_0 = base.loss_zero;
  auto recovered = [&](const Mat& lg) { return 1.0 - (mean_ce(lg, labels) - l_a) / (l_0 - l_a); };

  std::vector<int64_t> units(static_cast<size_t>(m));
  std::iota(units.begin(), units.end(), int64_t{0});
  std::stable_sort(units.begin(), units.end(),
                   [&](int64_t x, int64_t y) { return counts[static_cast<size_t>(x)] < counts[static_cast<size_t>(y)]; });
  std::vector<int64_t> candidates{0};
  for (int64_t c : counts) candidates.push_back(c);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  PruneResult r;
  r.unpruned_recovered_loss = base.recovered_loss;
  size_t next = 0;
  for (int64_t cutoff : candidates) {
    while (next < units.size() && counts[static_cast<size_t>(units[next])] <= cutoff) {
      const int64_t j = units[next++];
      logits.noalias() -= h.col(j) * unit_logits.row(j);
    }
    CutoffPoint pt;
    pt.cutoff = cutoff;
    pt.kept = m - static_cast<int64_t>(next);
    pt.recovered_loss = next == 0 ? base.recovered_loss : recovered(logits);
    r.sweep.push_back(pt);
  }

  r.cutoff = 0;
  r.pruned_recovered_loss = r.sweep.front().recovered_loss;
  for (const CutoffPoint& pt : r.sweep) {
    if (pt.recovered_loss >= base.recovered_loss - tolerance) {
      r.cutoff = pt.cutoff;
      r.pruned_recovered_loss = pt.recovered_loss;
    }
  }
  for (int64_t j = 0; j < m; ++j) {
    if (counts[static_cast<size_t>(j)] > r.cutoff) r.kept_neurons.push_back(j);
  }
  return r;
}

void save_sae(const SAEParams& params, const fs::path& dir) {
  params.check();
  fs::create_directories(dir);
  npy::write_tensor(dir / "W_E.npy", from_matrix(params.encoder_weights));
  npy::write_tensor(dir / "b_E.npy", from_vector(params.encoder_bias));
  npy::write_tensor(dir / "W_D.npy", from_matrix(params.decoder_weights));
  npy::write_tensor(dir / "b_D.npy", from_vector(params.decoder_bias));
  nlohmann::json meta = {{"n", params.input_dim()},
                         {"m", params.hidden_dim()},
                         {"W_E", "W_E.npy"},
                         {"b_E", "b_E.npy"},
                         {"W_D", "W_D.npy"},
                         {"b_D", "b_D.npy"}};
  std::ofstream(dir / "sae.json") << meta.dump(2) << '\n';
}

SAEParams load_sae(const fs::path& dir) {
  SAEParams p;
  p.encoder_weights = to_matrix(npy::read_tensor(dir / "W_E.npy"));
  p.encoder_bias = to_vector(npy::read_tensor(dir / "b_E.npy"));
  p.decoder_weights = to_matrix(npy::read_tensor(dir / "W_D.npy"));
  p.decoder_bias = to_vector(npy::read_tensor(dir / "b_D.npy"));
  try {
    p.check();
  } catch (const ContractError& e) {
    throw ValidationError(dir.string() + ": " + e.what());
  }
  return p;
}

}  // namespace mcbm
