#pragma once

#include <stdexcept>

#include "mustgan/ops.hpp"

namespace mustgan {

enum class AdvForm { least_squares, log_likelihood };

inline const char* to_string(AdvForm f) { return f == AdvForm::least_squares ? "least_squares" : "log_likelihood"; }

inline AdvForm adv_form_from_string(const std::string& s) {
  if (s == "least_squares") return AdvForm::least_squares;
  if (s == "log_likelihood") return AdvForm::log_likelihood;
  throw std::invalid_argument("unknown adversarial form '" + s + "' (least_squares | log_likelihood)");
}

template <class T>
struct AdvLosses {
  Tensor<T> disc;  // minimized by the discriminator
  Tensor<T> gen;   // minimized by the generator
};

/// Least-squares objectives on raw patch scores:
///   disc = mean (d_real - 1)^2 + mean d_fake^2,  gen = mean (d_fake - 1)^2.
template <class T>
AdvLosses<T> adv_losses_ls(const Tensor<T>& d_real, const Tensor<T>& d_fake) {
  detail::require(d_real.shape() == d_fake.shape(), "adv_losses_ls: real scores " + to_string(d_real.shape()) +
                                                        " vs fake scores " + to_string(d_fake.shape()));
  return {add(sq_err_to(d_real, 1.0), sq_err_to(d_fake, 0.0)), sq_err_to(d_fake, 1.0)};
}

/// Log-likelihood objectives on probabilities in (0,1), clamped to [eps, 1-eps]:
///   disc = -mean log d_real - mean log(1 - d_fake),  gen = -mean log d_fake.
template <class T>
AdvLosses<T> adv_losses_log(const Tensor<T>& d_real, const Tensor<T>& d_fake, double eps = kLogClampEps) {
  detail::require(d_real.shape() == d_fake.shape(), "adv_losses_log: real scores " + to_string(d_real.shape()) +
                                                         " vs fake scores " + to_string(d_fake.shape()));
  return {add(neg_log_likelihood(d_real, true, eps), neg_log_likelihood(d_fake, false, eps)),
          neg_log_likelihood(d_fake, true, eps)};
}

/// Discriminator objective on raw scores; the log form squashes through a sigmoid first.
template <class T>
Tensor<T> disc_loss(AdvForm form, const Tensor<T>& real_scores, const Tensor<T>& fake_scores) {
  if (form == AdvForm::least_squares) return adv_losses_ls(real_scores, fake_scores).disc;
  return adv_losses_log(sigmoid(real_scores), sigmoid(fake_scores)).disc;
}

/// Generator-side adversarial term on raw scores.
template <class T>
Tensor<T> gen_adv_loss(AdvForm form, const Tensor<T>& fake_scores) {
  if (form == AdvForm::least_squares) return sq_err_to(fake_scores, 1.0);
  return neg_log_likelihood(sigmoid(fake_scores), true);
}

/// Generator objective of a stream: least-squares adversarial term + lambda * mean |target - out|.
template <class T>
Tensor<T> stream_loss(const Tensor<T>& gen_out, const Tensor<T>& target, const Tensor<T>& d_fake,
                      double lambda_pixel = 100.0) {
  return add(sq_err_to(d_fake, 1.0), scale(l1_to(gen_out, target), lambda_pixel));
}

}  // namespace mustgan
