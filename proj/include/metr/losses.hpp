#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "metr/errors.hpp"
#include "metr/mat.hpp"

namespace metr {

struct FocalConfig {
  double alpha = 0.25;
  double gamma = 2.0;
};

struct AslConfig {
  double gamma_pos = 0.0;
  double gamma_neg = 4.0;
  double clip_m = 0.05;
};

struct LossAndGrad {
  double value = 0.0;
  Vec grad;  // d(value)/d(input), matching the input's length
};

inline double clamp_prob(double p, double eps = 1e-7) { return std::min(std::max(p, eps), 1.0 - eps); }

namespace detail {

inline void check_prob_open(double p, const char* who) {
  if (!(p > 0.0 && p < 1.0)) {
    throw DomainError(std::string(who) + ": probability " + std::to_string(p) + " outside (0,1)");
  }
}

// Focal term and d/dp for a single binary prediction.
inline double focal_term(double p, int target, const FocalConfig& cfg, double& dp) {
  if (target == 1) {
    const double q = 1.0 - p;
    const double pw = std::pow(q, cfg.gamma);
    const double value = cfg.alpha * pw * (-std::log(p));
    dp = cfg.alpha * ((cfg.gamma > 0.0 ? cfg.gamma * std::pow(q, cfg.gamma - 1.0) * std::log(p) : 0.0) - pw / p);
    return value;
  }
  const double pw = std::pow(p, cfg.gamma);
  const double value = (1.0 - cfg.alpha) * pw * (-std::log(1.0 - p));
  dp = (1.0 - cfg.alpha) *
       ((cfg.gamma > 0.0 ? cfg.gamma * std::pow(p, cfg.gamma - 1.0) * (-std::log(1.0 - p)) : 0.0) + pw / (1.0 - p));
  return value;
}

}  // namespace detail

// Binary focal loss for one probability. target=1: alpha*(1-p)^gamma*(-ln p);
// target=0: (1-alpha)*p^gamma*(-ln(1-p)). Caller clamps p beforehand.
inline LossAndGrad binary_focal(double p, int target, const FocalConfig& cfg) {
  detail::check_prob_open(p, "binary_focal");
  if (target != 0 && target != 1) throw DomainError("binary_focal: target must be 0 or 1");
  double dp = 0.0;
  const double value = detail::focal_term(p, target, cfg, dp);
  return {value, {dp}};
}

// The classification term of the group-matching cost: focal loss against a
// positive label on the query's single-class matchability.
inline double class_match_cost(double p, const FocalConfig& cfg) {
  detail::check_prob_open(p, "class_match_cost");
  double dp = 0.0;
  return detail::focal_term(p, 1, cfg, dp);
}

// Standard-matching classification cost: focal at the target class of a
// per-class sigmoid score vector.
inline double multiclass_focal_cost(const Vec& probs, int target_class, const FocalConfig& cfg) {
  if (target_class < 0 || target_class >= static_cast<int>(probs.size())) {
    throw std::out_of_range("multiclass_focal_cost: target class " + std::to_string(target_class) + " out of range");
  }
  return class_match_cost(probs[target_class], cfg);
}

// Asymmetric multi-label loss of the category scores. Negatives see the
// clip-shifted probability s_m = max(s - clip_m, 0), which contributes
// exactly zero below the clip.
inline LossAndGrad asymmetric_loss(const Vec& scores, const std::vector<int>& targets, const AslConfig& cfg,
                                   double mu_asl) {
  if (scores.size() != targets.size()) {
    throw ShapeError("asymmetric_loss: scores length " + std::to_string(scores.size()) + " vs targets length " +
                     std::to_string(targets.size()));
  }
  LossAndGrad out;
  out.grad.assign(scores.size(), 0.0);
  for (size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    detail::check_prob_open(s, "asymmetric_loss");
    if (targets[i] != 0 && targets[i] != 1) throw DomainError("asymmetric_loss: targets must be multi-hot");
    if (targets[i] == 1) {
      const double q = 1.0 - s;
      const double pw = std::pow(q, cfg.gamma_pos);
      out.value += mu_asl * pw * (-std::log(s));
      out.grad[i] = mu_asl * ((cfg.gamma_pos > 0.0 ? cfg.gamma_pos * std::pow(q, cfg.gamma_pos - 1.0) * std::log(s) : 0.0) -
                              pw / s);
    } else {
      const double sm = std::max(s - cfg.clip_m, 0.0);
      if (sm <= 0.0) continue;
      const double pw = std::pow(sm, cfg.gamma_neg);
      out.value += mu_asl * pw * (-std::log(1.0 - sm));
      out.grad[i] = mu_asl * ((cfg.gamma_neg > 0.0 ? cfg.gamma_neg * std::pow(sm, cfg.gamma_neg - 1.0) * (-std::log(1.0 - sm))
                                                   : 0.0) +
                              pw / (1.0 - sm));
    }
  }
  return out;
}

}  // namespace metr
