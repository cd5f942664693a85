#pragma once

// Training objectives: class-prior InfoNCE, supervised contrastive loss,
// cross-entropy, and their weighted combination. All four are built from
// autodiff tensor ops so gradients flow back into the network; the
// contrastive losses expect unit-norm embedding rows and reject anything
// else (callers normalize).

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sinuscl/tensor.hpp"

namespace sinuscl::losses {

enum class SupConForm {
  SumInsideLog,   // positive sum inside the logarithm (the default form)
  SumOutsideLog,  // mean of per-positive log terms, for comparison
};

struct LossConfig {
  double temperature = 0.1;
  double lambda = 1.0;
  SupConForm supcon_form = SupConForm::SumInsideLog;
};

// Class index sets I_c (via per-view labels) and the optional two-view
// pairing map k(i).
struct ContrastiveBatchIndex {
  std::vector<int> labels;    // 0 = normal, 1 = anomaly
  std::vector<int> pair;      // k(i); empty when the batch is single-view

  bool has_pairs() const { return !pair.empty(); }

  int class_count(int c) const {
    int n = 0;
    for (int l : labels) n += (l == c);
    return n;
  }

  void validate(size_t batch, bool need_pairs) const {
    if (labels.size() != batch)
      throw std::invalid_argument("batch index covers " + std::to_string(labels.size()) +
                                  " views but batch has " + std::to_string(batch));
    for (int l : labels)
      if (l != 0 && l != 1)
        throw std::invalid_argument("class label must be 0 or 1, got " + std::to_string(l));
    if (need_pairs) {
      if (!has_pairs())
        throw std::invalid_argument("two-view pairing map k(i) is missing");
      if (pair.size() != batch)
        throw std::invalid_argument("pairing map covers " + std::to_string(pair.size()) +
                                    " views but batch has " + std::to_string(batch));
      for (size_t i = 0; i < pair.size(); ++i) {
        int k = pair[i];
        if (k < 0 || static_cast<size_t>(k) >= batch || k == static_cast<int>(i) ||
            pair[static_cast<size_t>(k)] != static_cast<int>(i))
          throw std::invalid_argument("pairing map is not a fixed-point-free involution at " +
                                      std::to_string(i));
        if (labels[static_cast<size_t>(k)] != labels[i])
          throw std::invalid_argument("paired views disagree on class at " + std::to_string(i));
      }
    }
  }
};

inline const char* class_name(int c) { return c == 0 ? "normal" : "anomaly"; }

// dot(u,v) / (|u||v|); equals the plain dot product for unit vectors.
template <class S>
double cosine_sim(std::span<const S> u, std::span<const S> v) {
  if (u.size() != v.size())
    throw std::invalid_argument("cosine_sim: length mismatch " + std::to_string(u.size()) +
                                " vs " + std::to_string(v.size()));
  double uu = 0, vv = 0, uv = 0;
  for (size_t i = 0; i < u.size(); ++i) {
    uu += double(u[i]) * double(u[i]);
    vv += double(v[i]) * double(v[i]);
    uv += double(u[i]) * double(v[i]);
  }
  if (uu == 0.0 || vv == 0.0) throw std::invalid_argument("cosine_sim: zero-norm input");
  return uv / (std::sqrt(uu) * std::sqrt(vv));
}

inline double cosine_sim(std::span<const float> u, std::span<const float> v) {
  return cosine_sim<float>(u, v);
}

namespace detail {

template <class S>
void check_unit_rows(const nd::Tensor<S>& z, double tol = 1e-4) {
  if (z.ndim() != 2)
    throw std::invalid_argument("embeddings must be [batch,dim], got " +
                                nd::shape_str(z.shape()));
  int64_t n = z.extent(0), d = z.extent(1);
  const S* p = z.data().data();
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0;
    for (int64_t j = 0; j < d; ++j) acc += double(p[i * d + j]) * double(p[i * d + j]);
    double norm = std::sqrt(acc);
    if (std::fabs(norm - 1.0) > tol)
      throw std::invalid_argument("embedding row " + std::to_string(i) +
                                  " is not unit-norm (|z| = " + std::to_string(norm) +
                                  "); callers must normalize");
  }
}

// Shared scaffolding: similarity matrix / τ with stabilized exponentials
// restricted by masks. `pos` and `neg` are {0,1} masks with empty diagonal.
template <class S>
struct MaskedExp {
  nd::Tensor<S> shifted;   // (sim/τ - rowmax), huge negative on invalid entries
  nd::Tensor<S> exp;       // exp(shifted), exactly zero on invalid entries
  nd::Tensor<S> pos_mask;  // constants
  nd::Tensor<S> neg_mask;
};

template <class S>
MaskedExp<S> masked_exponentials(const nd::Tensor<S>& z, const std::vector<char>& pos,
                                 const std::vector<char>& neg, double tau) {
  const int64_t n = z.extent(0);
  auto sims = nd::mul_scalar(nd::matmul(z, nd::transpose2d(z)), static_cast<S>(1.0 / tau));
  std::vector<S> posm(static_cast<size_t>(n * n), S(0));
  std::vector<S> negm(static_cast<size_t>(n * n), S(0));
  std::vector<S> offs(static_cast<size_t>(n * n), S(0));
  for (int64_t i = 0; i < n * n; ++i) {
    if (pos[static_cast<size_t>(i)]) posm[static_cast<size_t>(i)] = S(1);
    if (neg[static_cast<size_t>(i)]) negm[static_cast<size_t>(i)] = S(1);
    if (!pos[static_cast<size_t>(i)] && !neg[static_cast<size_t>(i)])
      offs[static_cast<size_t>(i)] = S(-1e30);  // drops out of every sum
  }
  auto masked = nd::add(sims, nd::Tensor<S>::from_data({n, n}, std::move(offs)));
  auto rowmax = nd::max_along(masked, 1, true).detach();
  MaskedExp<S> me;
  me.shifted = nd::sub(masked, rowmax);
  me.exp = nd::exp(me.shifted);
  me.pos_mask = nd::Tensor<S>::from_data({n, n}, std::move(posm));
  me.neg_mask = nd::Tensor<S>::from_data({n, n}, std::move(negm));
  return me;
}

// Σ_i w_i · loss_i with w_i = 1/|M_{c(i)}|.
template <class S>
nd::Tensor<S> class_average(const nd::Tensor<S>& per_anchor,
                            const ContrastiveBatchIndex& index) {
  int64_t n = per_anchor.extent(0);
  std::vector<S> w(static_cast<size_t>(n));
  double counts[2] = {double(index.class_count(0)), double(index.class_count(1))};
  for (int64_t i = 0; i < n; ++i)
    w[static_cast<size_t>(i)] = static_cast<S>(1.0 / counts[index.labels[static_cast<size_t>(i)]]);
  return nd::sum(nd::mul(per_anchor, nd::Tensor<S>::from_data({n}, std::move(w))));
}

}  // namespace detail

// Supervised contrastive loss over a single-view batch: positives are every
// other same-class view, the positive sum sits inside the logarithm, and the
// denominator adds only cross-class terms.
template <class S>
nd::Tensor<S> loss_supcon(const nd::Tensor<S>& z, const ContrastiveBatchIndex& index,
                          const LossConfig& config = {}) {
  detail::check_unit_rows(z);
  const int64_t n = z.extent(0);
  index.validate(static_cast<size_t>(n), false);
  for (int c = 0; c <= 1; ++c)
    if (index.class_count(c) < 2)
      throw std::invalid_argument(std::string("loss_supcon: class ") + class_name(c) +
                                  " has fewer than 2 members; every anchor needs a positive");

  std::vector<char> pos(static_cast<size_t>(n * n), 0), neg(static_cast<size_t>(n * n), 0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      bool same = index.labels[static_cast<size_t>(i)] == index.labels[static_cast<size_t>(j)];
      (same ? pos : neg)[static_cast<size_t>(i * n + j)] = 1;
    }
  auto me = detail::masked_exponentials(z, pos, neg, config.temperature);
  auto num = nd::sum_along(nd::mul(me.exp, me.pos_mask), 1);
  auto den = nd::add(num, nd::sum_along(nd::mul(me.exp, me.neg_mask), 1));

  if (config.supcon_form == SupConForm::SumInsideLog)
    return detail::class_average(nd::sub(nd::log(den), nd::log(num)), index);

  // comparison variant: -(1/|P(i)|) Σ_p [ (s_ip - m_i) - log den_i ]
  std::vector<S> inv_pos_count(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    int cnt = index.class_count(index.labels[static_cast<size_t>(i)]) - 1;
    inv_pos_count[static_cast<size_t>(i)] = static_cast<S>(1.0 / cnt);
  }
  auto pos_mean = nd::mul(nd::sum_along(nd::mul(me.shifted, me.pos_mask), 1),
                          nd::Tensor<S>::from_data({n}, std::move(inv_pos_count)));
  return detail::class_average(nd::sub(nd::log(den), pos_mean), index);
}

// Class-prior InfoNCE over a two-view batch: the only positive is the
// augmentation twin k(i); same-class non-twins are excluded from numerator
// and denominator alike.
template <class S>
nd::Tensor<S> loss_simclr(const nd::Tensor<S>& z, const ContrastiveBatchIndex& index,
                          const LossConfig& config = {}) {
  detail::check_unit_rows(z);
  const int64_t n = z.extent(0);
  index.validate(static_cast<size_t>(n), true);
  for (int c = 0; c <= 1; ++c)
    if (index.class_count(c) < 1)
      throw std::invalid_argument(std::string("loss_simclr: class ") + class_name(c) +
                                  " has no members in the batch");

  std::vector<char> pos(static_cast<size_t>(n * n), 0), neg(static_cast<size_t>(n * n), 0);
  for (int64_t i = 0; i < n; ++i) {
    pos[static_cast<size_t>(i * n + index.pair[static_cast<size_t>(i)])] = 1;
    for (int64_t j = 0; j < n; ++j)
      if (index.labels[static_cast<size_t>(i)] != index.labels[static_cast<size_t>(j)])
        neg[static_cast<size_t>(i * n + j)] = 1;
  }
  auto me = detail::masked_exponentials(z, pos, neg, config.temperature);
  auto num = nd::sum_along(nd::mul(me.exp, me.pos_mask), 1);
  auto den = nd::add(num, nd::sum_along(nd::mul(me.exp, me.neg_mask), 1));
  return detail::class_average(nd::sub(nd::log(den), nd::log(num)), index);
}

// Mean over the batch of -log softmax(logits)[y], stabilized by row-max
// subtraction.
template <class S>
nd::Tensor<S> loss_ce(const nd::Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || logits.extent(1) != 2)
    throw std::invalid_argument("loss_ce expects [batch,2] logits, got " +
                                nd::shape_str(logits.shape()));
  const int64_t n = logits.extent(0);
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("loss_ce: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(n) + " rows");
  std::vector<S> onehot(static_cast<size_t>(n * 2), S(0));
  for (int64_t i = 0; i < n; ++i) {
    int y = labels[static_cast<size_t>(i)];
    if (y != 0 && y != 1)
      throw std::invalid_argument("loss_ce: label must be 0 or 1, got " + std::to_string(y));
    onehot[static_cast<size_t>(i * 2 + y)] = S(1);
  }
  auto m = nd::max_along(logits, 1, true).detach();
  auto shifted = nd::sub(logits, m);
  auto lse = nd::log(nd::sum_along(nd::exp(shifted), 1));
  auto picked = nd::sum_along(
      nd::mul(shifted, nd::Tensor<S>::from_data({n, 2}, std::move(onehot))), 1);
  return nd::mean(nd::sub(lse, picked));
}

// L_sc + λ·L_ce; gradients reach both heads and the shared encoder.
template <class S>
nd::Tensor<S> loss_combined(const nd::Tensor<S>& z, const nd::Tensor<S>& logits,
                            const std::vector<int>& labels, const ContrastiveBatchIndex& index,
                            const LossConfig& config = {}) {
  auto sc = loss_supcon(z, index, config);
  auto ce = loss_ce(logits, labels);
  return nd::add(sc, nd::mul_scalar(ce, static_cast<S>(config.lambda)));
}

}  // namespace sinuscl::losses
