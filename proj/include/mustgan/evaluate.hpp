#pragma once

// Model-level evaluation over phantom samples: synthesize, map back to [0,1], normalize each
// subject's synthesized volume to a peak of 1, then score against the ground truth.

#include <cstdio>
#include <functional>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "mustgan/metrics.hpp"
#include "mustgan/model.hpp"
#include "mustgan/phantom.hpp"
#include "mustgan/train.hpp"

namespace mustgan {

/// Contrast indices (into PhantomSpec::contrasts) used as sources and target.
struct RoleIndices {
  std::vector<std::size_t> sources;
  std::size_t target = 0;
};

/// Empty roles select the default: every contrast but the last is a source.
inline RoleIndices resolve_roles(const PhantomSpec& spec, const ContrastRoles& roles) {
  RoleIndices r;
  if (roles.sources.empty() && roles.target.empty()) {
    for (std::size_t c = 0; c + 1 < spec.contrasts.size(); ++c) r.sources.push_back(c);
    r.target = spec.contrasts.size() - 1;
    return r;
  }
  for (const auto& s : roles.sources) r.sources.push_back(spec.contrast_index(s));
  r.target = spec.contrast_index(roles.target);
  std::set<std::size_t> seen(r.sources.begin(), r.sources.end());
  if (seen.size() != r.sources.size()) throw std::invalid_argument("a contrast is listed twice as a source");
  if (seen.count(r.target)) throw std::invalid_argument("target contrast " + roles.target + " is also a source");
  if (r.sources.empty()) throw std::invalid_argument("no source contrasts");
  return r;
}

inline ContrastRoles role_names(const PhantomSpec& spec, const RoleIndices& r) {
  ContrastRoles out;
  for (std::size_t s : r.sources) out.sources.push_back(spec.contrasts.at(s));
  out.target = spec.contrasts.at(r.target);
  return out;
}

/// [0,1] image -> network space [-1,1].
template <class T>
Tensor<T> to_network(const Tensor<double>& x) {
  std::vector<T> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(2 * x[i] - 1);
  return Tensor<T>(x.shape(), std::move(v));
}

/// Network output in (-1,1) -> [0,1].
template <class T>
Tensor<double> from_network(const Tensor<T>& y) {
  std::vector<double> v(y.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (static_cast<double>(y[i]) + 1) / 2;
  return Tensor<double>(y.shape(), std::move(v));
}

template <class T>
TrainingSet<T> make_training_set(const std::vector<const PhantomSample*>& samples, const RoleIndices& roles) {
  TrainingSet<T> out;
  for (const auto* s : samples) {
    TrainingPair<T> p;
    for (std::size_t c : roles.sources) p.sources.push_back(to_network<T>(s->images.at(c)));
    p.target = to_network<T>(s->images.at(roles.target));
    out.push_back(std::move(p));
  }
  return out;
}

/// Maps a sample to a synthesized target in [0,1] (before per-volume normalization).
using Synthesizer = std::function<Tensor<double>(const PhantomSample&)>;

/// "mustgan" runs the fused model; "stream{k}" runs stream k alone (k = K+1 is many-to-one).
template <class T>
Synthesizer model_synthesizer(const MultiStreamModel<T>& model, const RoleIndices& roles, const std::string& which) {
  std::size_t stream = 0;
  if (which != "mustgan") {
    if (which.rfind("stream", 0) != 0) throw std::invalid_argument("unknown synthesizer '" + which + "'");
    stream = std::stoul(which.substr(6));
    if (stream < 1 || stream > model.K() + 1) throw std::invalid_argument("no stream " + which.substr(6));
  }
  if (roles.sources.size() != model.K())
    throw std::invalid_argument("model expects " + std::to_string(model.K()) + " sources, roles give " +
                                std::to_string(roles.sources.size()));
  return [&model, roles, stream](const PhantomSample& s) {
    std::vector<Tensor<T>> src;
    for (std::size_t c : roles.sources) src.push_back(to_network<T>(s.images.at(c)));
    return from_network(stream == 0 ? synthesize(model, src) : synthesize_stream(model, stream, src));
  };
}

/// Ground-truth hook: returns the target itself.
inline Synthesizer ground_truth_synthesizer(const RoleIndices& roles) {
  return [roles](const PhantomSample& s) { return s.images.at(roles.target).clone(); };
}

struct ModelMetrics {
  std::string name;
  std::vector<double> psnr, ssim;  // per sample, in sample order
  SummaryStats psnr_slices, ssim_slices;
  SummaryStats psnr_subjects, ssim_subjects;  // over per-subject means
};

struct PairReport {
  std::string a, b;
  PairComparison psnr, ssim;
};

struct MetricsReport {
  std::string split;
  std::vector<std::pair<std::size_t, std::size_t>> samples;  // (subject, slice)
  std::vector<ModelMetrics> models;
  std::vector<PairReport> pairs;

  const ModelMetrics& model(const std::string& name) const {
    for (const auto& m : models)
      if (m.name == name) return m;
    throw std::out_of_range("no model named " + name + " in report");
  }
  const PairReport& pair(const std::string& a, const std::string& b) const {
    for (const auto& p : pairs)
      if (p.a == a && p.b == b) return p;
    throw std::out_of_range("no comparison " + a + " vs " + b + " in report");
  }

  nlohmann::json to_json() const {
    auto num = [](double v) -> nlohmann::json {
      if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
      if (std::isnan(v)) return nullptr;
      return v;
    };
    auto stats = [&](const SummaryStats& s) {
      return nlohmann::json{{"mean", num(s.mean)}, {"std", num(s.std)}, {"n", s.n}, {"n_infinite", s.n_infinite}};
    };
    nlohmann::json j;
    j["split"] = split;
    nlohmann::json ss = nlohmann::json::array();
    for (const auto& [a, b] : samples) ss.push_back({{"subject", a}, {"slice", b}});
    j["samples"] = ss;
    for (const auto& m : models) {
      nlohmann::json p = nlohmann::json::array(), s = nlohmann::json::array();
      for (double v : m.psnr) p.push_back(num(v));
      for (double v : m.ssim) s.push_back(num(v));
      j["models"].push_back({{"name", m.name},
                             {"psnr", p},
                             {"ssim", s},
                             {"psnr_slices", stats(m.psnr_slices)},
                             {"ssim_slices", stats(m.ssim_slices)},
                             {"psnr_subjects", stats(m.psnr_subjects)},
                             {"ssim_subjects", stats(m.ssim_subjects)}});
    }
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : pairs) {
      auto cmp = [&](const PairComparison& c) {
        return nlohmann::json{{"wins_a", c.wins_a},         {"wins_b", c.wins_b},   {"ties", c.ties},
                              {"win_rate_a", c.win_rate_a()}, {"win_rate_b", c.win_rate_b()},
                              {"p_value", c.p_value},       {"significant", c.significant}};
      };
      j["pairs"].push_back({{"a", p.a}, {"b", p.b}, {"psnr", cmp(p.psnr)}, {"ssim", cmp(p.ssim)}});
    }
    return j;
  }

  /// Aligned columns: model, PSNR mean ± std, SSIM mean ± std (per slice).
  std::string to_table() const {
    std::size_t w = 5;
    for (const auto& m : models) w = std::max(w, m.name.size());
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-*s  %-18s  %-18s  %s\n", static_cast<int>(w), "model", "PSNR (dB)", "SSIM",
                  "identical");
    out += buf;
    for (const auto& m : models) {
      std::snprintf(buf, sizeof buf, "%-*s  %7.3f +- %-7.3f  %7.4f +- %-7.4f  %zu\n", static_cast<int>(w), m.name.c_str(),
                    m.psnr_slices.mean, m.psnr_slices.std, m.ssim_slices.mean, m.ssim_slices.std,
                    m.psnr_slices.n_infinite);
      out += buf;
    }
    for (const auto& p : pairs) {
      std::snprintf(buf, sizeof buf, "%s vs %s: PSNR wins %.2f%% / %.2f%%, p = %.4g%s\n", p.a.c_str(), p.b.c_str(),
                    100 * p.psnr.win_rate_a(), 100 * p.psnr.win_rate_b(), p.psnr.p_value,
                    p.psnr.significant ? " (p<0.05)" : "");
      out += buf;
    }
    return out;
  }
};

namespace detail {

inline SummaryStats subject_summary(const std::vector<double>& values,
                                    const std::vector<std::pair<std::size_t, std::size_t>>& ids) {
  std::map<std::size_t, std::vector<double>> by;
  for (std::size_t k = 0; k < values.size(); ++k) by[ids[k].first].push_back(values[k]);
  std::vector<double> means;
  for (const auto& [s, v] : by) means.push_back(summarize(v).mean);
  return summarize(means);
}

}  // namespace detail

/// Scores every synthesizer on `samples`; all pairs (in the order given) are compared.
inline MetricsReport evaluate(const std::vector<std::pair<std::string, Synthesizer>>& synths,
                              const std::vector<const PhantomSample*>& samples, const RoleIndices& roles,
                              const std::string& split = "", const SsimOptions& ssim_opt = {}) {
  if (samples.empty()) throw std::invalid_argument("evaluation split '" + split + "' is empty");
  if (synths.empty()) throw std::invalid_argument("no models to evaluate");
  MetricsReport rep;
  rep.split = split;
  for (const auto* s : samples) rep.samples.emplace_back(s->subject_id, s->slice_id);

  for (const auto& [name, fn] : synths) {
    std::vector<Tensor<double>> out;
    for (const auto* s : samples) out.push_back(fn(*s));
    std::map<std::size_t, std::vector<Tensor<double>*>> volumes;
    for (std::size_t k = 0; k < samples.size(); ++k) volumes[samples[k]->subject_id].push_back(&out[k]);
    for (auto& [subject, vol] : volumes) normalize_volume(vol);

    ModelMetrics m;
    m.name = name;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const auto& ref = samples[k]->images.at(roles.target);
      m.psnr.push_back(psnr(ref, out[k]));
      m.ssim.push_back(ssim(ref, out[k], ssim_opt));
    }
    m.psnr_slices = summarize(m.psnr);
    m.ssim_slices = summarize(m.ssim);
    m.psnr_subjects = detail::subject_summary(m.psnr, rep.samples);
    m.ssim_subjects = detail::subject_summary(m.ssim, rep.samples);
    rep.models.push_back(std::move(m));
  }
  for (std::size_t a = 0; a < rep.models.size(); ++a)
    for (std::size_t b = a + 1; b < rep.models.size(); ++b)
      rep.pairs.push_back({rep.models[a].name, rep.models[b].name, compare_paired(rep.models[a].psnr, rep.models[b].psnr),
                           compare_paired(rep.models[a].ssim, rep.models[b].ssim)});
  return rep;
}

}  // namespace mustgan
