#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mustgan/core/parallel.hpp"
#include "mustgan/losses.hpp"
#include "mustgan/model.hpp"
#include "mustgan/optim.hpp"

namespace mustgan {

struct TrainConfig {
  std::size_t epochs = 100;
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double lambda_pixel = 100.0;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::constant_then_linear;
  std::size_t cutover = 50;
  AdvForm adv_form = AdvForm::least_squares;
  /// Weight of the adversarial term in generator updates. 1 in normal use; 0 isolates the pixel loss.
  double adv_weight = 1.0;
  bool shuffle = true;
  /// Run every kernel on one thread.
  bool sequential = false;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw std::invalid_argument("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("beta2 must lie in [0, 1)");
    if (!(lambda_pixel >= 0)) throw std::invalid_argument("lambda_pixel must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(adv_weight >= 0)) throw std::invalid_argument("adv_weight must be >= 0");
  }

  double lr_at(std::size_t epoch) const { return lr_at_epoch(lr, schedule, cutover, epochs, epoch); }
};

inline double lr_at_epoch(const TrainConfig& c, std::size_t epoch) { return c.lr_at(epoch); }

/// Joint-phase defaults: log-likelihood adversarial form, otherwise as the stream phase.
inline TrainConfig default_joint_config() {
  TrainConfig c;
  c.adv_form = AdvForm::log_likelihood;
  return c;
}

/// One co-registered example in network space ([-1,1]); every tensor is [1,1,H,W].
template <class T>
struct TrainingPair {
  std::vector<Tensor<T>> sources;
  Tensor<T> target;
};

template <class T>
using TrainingSet = std::vector<TrainingPair<T>>;

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::string stream;  // "1".."K+1" or "joint"
  double loss_disc = 0;
  double loss_gen_adv = 0;
  double loss_pixel = 0;
};

class LossLog {
 public:
  void add(LossRecord r) { records_.push_back(std::move(r)); }
  const std::vector<LossRecord>& records() const { return records_; }
  bool empty() const { return records_.empty(); }

  std::string to_csv() const {
    std::string out = "epoch,batch,stream,loss_disc,loss_gen_adv,loss_pixel\n";
    char buf[160];
    for (const auto& r : records_) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%s,%.17g,%.17g,%.17g\n", r.epoch, r.batch, r.stream.c_str(), r.loss_disc,
                    r.loss_gen_adv, r.loss_pixel);
      out += buf;
    }
    return out;
  }

 private:
  std::vector<LossRecord> records_;
};

/// Training stopped on a non-finite loss.
class NumericAbort : public std::runtime_error {
 public:
  NumericAbort(std::size_t epoch, std::size_t batch, std::string stream, const std::string& what)
      : std::runtime_error("non-finite " + what + " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + ", stream " + stream),
        epoch_(epoch),
        batch_(batch),
        stream_(std::move(stream)) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }
  const std::string& stream() const { return stream_; }

 private:
  std::size_t epoch_, batch_;
  std::string stream_;
};

/// FNV-1a over keys, shapes and raw values; used to compare parameter sets cheaply.
template <class T>
std::uint64_t parameter_digest(const ParameterList<T>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  };
  for (const auto& p : params) {
    mix(p.key.data(), p.key.size());
    for (std::size_t d : p.tensor.shape()) mix(&d, sizeof d);
    mix(p.tensor.values().data(), p.tensor.numel() * sizeof(T));
  }
  return h;
}

namespace detail {

/// Sample order for an epoch; depends only on (seed, epoch) so any run can be resumed or branched.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch, bool shuffle) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  if (shuffle) {
    std::mt19937_64 rng(mix_seed(seed, 0x5eed0000ULL + epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  }
  return order;
}

template <class T>
struct Batch {
  std::vector<Tensor<T>> sources;
  Tensor<T> target;
};

template <class T>
std::vector<Batch<T>> make_batches(const TrainingSet<T>& data, const std::vector<std::size_t>& order, std::size_t size) {
  std::vector<Batch<T>> out;
  for (std::size_t b = 0; b < order.size(); b += size) {
    const std::size_t e = std::min(order.size(), b + size);
    Batch<T> batch;
    const std::size_t K = data[order[b]].sources.size();
    for (std::size_t j = 0; j < K; ++j) {
      std::vector<Tensor<T>> items;
      for (std::size_t q = b; q < e; ++q) items.push_back(data[order[q]].sources[j]);
      batch.sources.push_back(stack_batch(items));
    }
    std::vector<Tensor<T>> targets;
    for (std::size_t q = b; q < e; ++q) targets.push_back(data[order[q]].target);
    batch.target = stack_batch(targets);
    out.push_back(std::move(batch));
  }
  return out;
}

template <class T>
void set_trainable(Adam<T>& opt, bool on) {
  for (const auto& g : opt.groups())
    for (auto p : g.params) p.tensor.set_requires_grad(on);
}

struct StepLosses {
  double disc, gen_adv, pixel;
};

/// One conditional-GAN batch: discriminator update on the detached fake, then generator update
/// with the discriminator frozen. `generate` must record onto the active tape.
template <class T, class GenFn>
StepLosses gan_batch(GenFn&& generate, const Discriminator<T>& disc, const std::vector<Tensor<T>>& conditioning,
                     const Tensor<T>& target, Adam<T>& gen_opt, Adam<T>& disc_opt, double lr, const TrainConfig& cfg,
                     std::size_t epoch, std::size_t batch, const std::string& stream) {
  gen_opt.zero_grad();
  disc_opt.zero_grad();
  Tape<T> gen_tape;
  const Tensor<T> fake = generate();

  StepLosses out{};
  {
    Tape<T> disc_tape;
    const Tensor<T> d_real = disc.forward(conditioning, target);
    const Tensor<T> d_fake = disc.forward(conditioning, fake.detach());
    const Tensor<T> loss = disc_loss(cfg.adv_form, d_real, d_fake);
    out.disc = loss.item();
    if (!std::isfinite(out.disc)) throw NumericAbort(epoch, batch, stream, "discriminator loss");
    disc_tape.backward(loss);
  }
  disc_opt.step(lr);

  set_trainable(disc_opt, false);
  try {
    const Tensor<T> adv = gen_adv_loss(cfg.adv_form, disc.forward(conditioning, fake));
    const Tensor<T> pixel = l1_to(fake, target);
    out.gen_adv = adv.item();
    out.pixel = pixel.item();
    if (!std::isfinite(out.gen_adv)) throw NumericAbort(epoch, batch, stream, "generator adversarial loss");
    if (!std::isfinite(out.pixel)) throw NumericAbort(epoch, batch, stream, "pixel loss");
    gen_tape.backward(add(scale(adv, cfg.adv_weight), scale(pixel, cfg.lambda_pixel)));
  } catch (...) {
    set_trainable(disc_opt, true);
    throw;
  }
  set_trainable(disc_opt, true);
  gen_opt.step(lr);
  return out;
}

template <class T>
void check_training_set(const TrainingSet<T>& data, std::size_t K) {
  if (data.empty()) throw std::invalid_argument("training set is empty");
  for (const auto& p : data)
    if (p.sources.size() != K)
      throw std::invalid_argument("training pair holds " + std::to_string(p.sources.size()) + " sources, model expects " +
                                  std::to_string(K));
}

}  // namespace detail

using EpochCallback = std::function<void(std::size_t epoch, double seconds)>;

/// Phase 1: every stream (K one-to-one, one many-to-one) trained independently with its own
/// generator and discriminator optimizers.
template <class T>
class StreamTrainer {
 public:
  StreamTrainer(MultiStreamModel<T>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    for (std::size_t id = 1; id <= model_.K() + 1; ++id) {
      const std::string p = "stream" + std::to_string(id) + "/";
      ParameterList<T> g, d;
      model_.stream(id).generator.collect_parameters(p, g);
      model_.stream(id).discriminator.collect_parameters(p + "disc/", d);
      gen_.emplace_back(cfg_.beta1, cfg_.beta2);
      disc_.emplace_back(cfg_.beta1, cfg_.beta2);
      gen_.back().add_group("generator", std::move(g));
      disc_.back().add_group("discriminator", std::move(d));
    }
  }

  void run_epoch(std::size_t epoch, const TrainingSet<T>& data, LossLog* log = nullptr) {
    detail::check_training_set(data, model_.K());
    std::optional<SequentialScope> seq;
    if (cfg_.sequential) seq.emplace();
    const double lr = cfg_.lr_at(epoch);
    const auto batches = detail::make_batches(data, detail::epoch_order(data.size(), cfg_.seed, epoch, cfg_.shuffle),
                                              cfg_.batch_size);
    for (std::size_t id = 1; id <= model_.K() + 1; ++id) {
      auto& s = model_.stream(id);
      const std::string name = std::to_string(id);
      for (std::size_t b = 0; b < batches.size(); ++b) {
        const auto& batch = batches[b];
        const Tensor<T> input = model_.stream_input(id, batch.sources);
        const auto losses = detail::gan_batch<T>([&] { return s.generator.forward(input); }, s.discriminator,
                                                 model_.stream_conditioning(id, batch.sources), batch.target,
                                                 gen_[id - 1], disc_[id - 1], lr, cfg_, epoch, b + 1, name);
        if (log) log->add({epoch, b + 1, name, losses.disc, losses.gen_adv, losses.pixel});
      }
    }
  }

  /// Runs epochs first..cfg.epochs.
  void run(const TrainingSet<T>& data, LossLog* log = nullptr, std::size_t first = 1, const EpochCallback& cb = {}) {
    for (std::size_t e = first; e <= cfg_.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      run_epoch(e, data, log);
      if (cb) cb(e, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
  }

  const TrainConfig& config() const { return cfg_; }
  /// Optimizers by checkpoint name: "stream{id}/gen", "stream{id}/disc".
  std::vector<std::pair<std::string, Adam<T>*>> optimizers() {
    std::vector<std::pair<std::string, Adam<T>*>> out;
    for (std::size_t id = 1; id <= gen_.size(); ++id) {
      out.emplace_back("stream" + std::to_string(id) + "/gen", &gen_[id - 1]);
      out.emplace_back("stream" + std::to_string(id) + "/disc", &disc_[id - 1]);
    }
    return out;
  }
  Adam<T>& generator_optimizer(std::size_t id) { return gen_.at(id - 1); }
  Adam<T>& discriminator_optimizer(std::size_t id) { return disc_.at(id - 1); }

 private:
  MultiStreamModel<T>& model_;
  TrainConfig cfg_;
  std::vector<Adam<T>> gen_, disc_;
};

/// Phase-2 ownership of every model parameter key.
struct PhaseTwoPartition {
  std::vector<std::string> pre_fusion;  // stream generator layers 1..i, fine-tuned
  std::vector<std::string> joint;       // joint network and its discriminator, trained
  std::vector<std::string> frozen;      // stream layers i+1..L and stream discriminators
};

template <class T>
PhaseTwoPartition phase_two_partition(const MultiStreamModel<T>& model) {
  PhaseTwoPartition part;
  const std::size_t i = model.fusion().position, L = model.total_layers();
  for (std::size_t id = 1; id <= model.K() + 1; ++id) {
    const std::string p = "stream" + std::to_string(id) + "/";
    ParameterList<T> pre, post, disc;
    model.stream(id).generator.collect_parameters(p, 1, i, pre);
    model.stream(id).generator.collect_parameters(p, i + 1, L, post);
    model.stream(id).discriminator.collect_parameters(p + "disc/", disc);
    for (auto& x : pre) part.pre_fusion.push_back(x.key);
    for (auto& x : post) part.frozen.push_back(x.key);
    for (auto& x : disc) part.frozen.push_back(x.key);
  }
  ParameterList<T> j;
  model.joint().collect_generator_parameters(j);
  model.joint().collect_discriminator_parameters(j);
  for (auto& x : j) part.joint.push_back(x.key);
  return part;
}

/// Phase 2: joint network and its discriminator trained at lr; stream layers up to the fusion
/// position fine-tuned at lr * finetune_lr_ratio; everything after the fusion point untouched.
template <class T>
class JointTrainer {
 public:
  JointTrainer(MultiStreamModel<T>& model, TrainConfig cfg, double finetune_lr_ratio = 0.5)
      : model_(model), cfg_(std::move(cfg)), gen_(cfg_.beta1, cfg_.beta2), disc_(cfg_.beta1, cfg_.beta2) {
    cfg_.validate();
    if (!(finetune_lr_ratio >= 0)) throw std::invalid_argument("finetune_lr_ratio must be >= 0");
    const std::size_t i = model_.fusion().position;
    ParameterList<T> joint, pre, dj;
    model_.joint().collect_generator_parameters(joint);
    for (std::size_t id = 1; id <= model_.K() + 1; ++id)
      model_.stream(id).generator.collect_parameters("stream" + std::to_string(id) + "/", 1, i, pre);
    model_.joint().collect_discriminator_parameters(dj);
    gen_.add_group("joint", std::move(joint), 1.0);
    gen_.add_group("pre_fusion", std::move(pre), finetune_lr_ratio);
    disc_.add_group("joint_disc", std::move(dj), 1.0);
  }

  void run_epoch(std::size_t epoch, const TrainingSet<T>& data, LossLog* log = nullptr) {
    detail::check_training_set(data, model_.K());
    std::optional<SequentialScope> seq;
    if (cfg_.sequential) seq.emplace();
    const double lr = cfg_.lr_at(epoch);
    const auto batches = detail::make_batches(data, detail::epoch_order(data.size(), cfg_.seed, epoch, cfg_.shuffle),
                                              cfg_.batch_size);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      const auto losses = detail::gan_batch<T>([&] { return synthesize(model_, batch.sources); },
                                               model_.joint().discriminator(), batch.sources, batch.target, gen_, disc_,
                                               lr, cfg_, epoch, b + 1, "joint");
      if (log) log->add({epoch, b + 1, "joint", losses.disc, losses.gen_adv, losses.pixel});
    }
  }

  void run(const TrainingSet<T>& data, LossLog* log = nullptr, std::size_t first = 1, const EpochCallback& cb = {}) {
    for (std::size_t e = first; e <= cfg_.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      run_epoch(e, data, log);
      if (cb) cb(e, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
  }

  const TrainConfig& config() const { return cfg_; }
  TrainConfig& mutable_config() { return cfg_; }
  Adam<T>& generator_optimizer() { return gen_; }
  Adam<T>& discriminator_optimizer() { return disc_; }
  const Adam<T>& generator_optimizer() const { return gen_; }
  std::vector<std::pair<std::string, Adam<T>*>> optimizers() { return {{"joint/gen", &gen_}, {"joint/disc", &disc_}}; }

  /// Current learning rates per group at `epoch`.
  double joint_lr(std::size_t epoch) const { return gen_.group_lr("joint", cfg_.lr_at(epoch)); }
  double pre_fusion_lr(std::size_t epoch) const { return gen_.group_lr("pre_fusion", cfg_.lr_at(epoch)); }

 private:
  MultiStreamModel<T>& model_;
  TrainConfig cfg_;
  Adam<T> gen_, disc_;
};

template <class T>
LossLog train_streams(MultiStreamModel<T>& model, const TrainingSet<T>& data, const TrainConfig& cfg) {
  LossLog log;
  StreamTrainer<T>(model, cfg).run(data, &log);
  return log;
}

template <class T>
LossLog train_joint(MultiStreamModel<T>& model, const TrainingSet<T>& data, const TrainConfig& cfg,
                    double finetune_lr_ratio = 0.5) {
  LossLog log;
  JointTrainer<T>(model, cfg, finetune_lr_ratio).run(data, &log);
  return log;
}

}  // namespace mustgan
