#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "quadrank/adadelta.hpp"
#include "quadrank/core.hpp"
#include "quadrank/model.hpp"
#include "quadrank/model_io.hpp"
#include "quadrank/quadgen.hpp"
#include "quadrank/rankloss.hpp"

namespace quadrank {

struct TrainConfig {
  std::string arch = "linear";
  std::size_t epochs = 200;
  std::size_t quads_per_pair = 2000;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  QuadSampling sampling;
  std::size_t heldout_count = 1000;
  std::size_t heldout_every = 10;  // epochs between held-out evaluations (0: start and end only)
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  std::filesystem::path checkpoint_dir;
  std::string checkpoint_stem = "model";
  std::optional<std::filesystem::path> resume_from;

  void validate() const {
    if (quads_per_pair < 1 || batch_size < 1 || heldout_count < 1)
      throw Error("train: counts must be >= 1");
    if (batch_size > quads_per_pair) throw Error("train: batch_size exceeds quads_per_pair");
    if (checkpoint_every > 0 && checkpoint_dir.empty())
      throw Error("train: checkpoint_every set without checkpoint_dir");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t source = 0;
  double mean_loss = 0;
  double misrank_fraction = 0;
  double wall_seconds = 0;
  std::uint64_t rng_digest = 0;
};

struct HeldoutRecord {
  std::size_t epoch = 0;  // 0: before training
  double mean_loss = 0;
  double misrank_fraction = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<HeldoutRecord> heldout;

  double initial_heldout_misrank() const { return heldout.empty() ? 0 : heldout.front().misrank_fraction; }
  double final_heldout_misrank() const { return heldout.empty() ? 0 : heldout.back().misrank_fraction; }
};

struct TrainResult {
  ResponseModel model;
  TrainLog log;
  AdadeltaState optimizer;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed * 0x9E3779B97F4A7C15ull + stream;
  x = (x ^ (x >> 31)) * 0xD6E8FEB86659FD93ull;
  return x ^ (x >> 32);
}

inline constexpr std::uint64_t kHeldoutStream = 0xFFFF'FFFF'0000'0001ull;

}  // namespace detail

// Responses of every quadruple, evaluated in eval mode.
template <class T>
std::vector<QuadResponses> quad_responses(const BasicResponseModel<T>& model,
                                          std::span<const Quadruple> quads,
                                          Mode mode = Mode::eval) {
  std::vector<Patch17> patches;
  patches.reserve(quads.size() * 4);
  for (const auto& q : quads) patches.insert(patches.end(), q.patches.begin(), q.patches.end());
  const auto r = model.forward(make_patch_batch<T>(patches), mode);
  std::vector<QuadResponses> out(quads.size());
  for (std::size_t i = 0; i < quads.size(); ++i) {
    out[i] = {double(r.responses[4 * i]), double(r.responses[4 * i + 1]),
              double(r.responses[4 * i + 2]), double(r.responses[4 * i + 3])};
  }
  return out;
}

// Monitoring set drawn from its own stream, independent of the training draws.
inline std::vector<Quadruple> make_heldout_set(std::span<const PairSource> sources,
                                               std::size_t count, std::uint64_t seed,
                                               const QuadSampling& sampling) {
  Rng rng(detail::mix_seed(seed, detail::kHeldoutStream));
  constexpr std::size_t kPerPair = 250;
  std::vector<Quadruple> out;
  out.reserve(count);
  while (out.size() < count) {
    const CorrespondencePair pair = sources[rng.below(sources.size())](rng);
    for (std::size_t i = 0; i < kPerPair && out.size() < count; ++i) {
      out.push_back(sample_quadruple(pair, rng, sampling));
    }
  }
  return out;
}

struct StepResult {
  double mean_loss = 0;
  double misrank_fraction = 0;
};

// One optimizer step on a batch: train-mode forward over all 4 * batch patches
// jointly, hinge gradients per quadruple averaged over the batch, backward,
// then the Adadelta update.
inline StepResult train_step(ResponseModel& model, AdadeltaState& state,
                             std::span<const Quadruple> batch) {
  std::vector<Patch17> patches;
  patches.reserve(batch.size() * 4);
  for (const auto& q : batch) patches.insert(patches.end(), q.patches.begin(), q.patches.end());
  const auto fwd = model.forward(make_patch_batch<float>(patches), Mode::train);
  std::vector<float> upstream(patches.size());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  StepResult res;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const QuadResponses q{fwd.responses[4 * i], fwd.responses[4 * i + 1],
                          fwd.responses[4 * i + 2], fwd.responses[4 * i + 3]};
    const HingeResult h = hinge_grad(q);
    res.mean_loss += h.loss * inv_n;
    res.misrank_fraction += misrank_count(agreement(q)) * inv_n;
    upstream[4 * i] = static_cast<float>(h.grad.g1 * inv_n);
    upstream[4 * i + 1] = static_cast<float>(h.grad.g2 * inv_n);
    upstream[4 * i + 2] = static_cast<float>(h.grad.g3 * inv_n);
    upstream[4 * i + 3] = static_cast<float>(h.grad.g4 * inv_n);
  }
  if (!std::isfinite(res.mean_loss)) throw Error("train: non-finite loss");
  const auto grad = model.backward(fwd.cache, std::span<const float>(upstream));
  adadelta_step<float>(state, model.params(), grad);
  model.update_running_stats(fwd.cache);
  return res;
}

inline std::filesystem::path checkpoint_path(const TrainConfig& cfg, std::size_t epoch) {
  char suffix[32];
  std::snprintf(suffix, sizeof suffix, "_epoch%06zu.qrnk", epoch);
  return cfg.checkpoint_dir / (cfg.checkpoint_stem + suffix);
}

// Every epoch draws from its own stream derived from (seed, epoch), so a run
// resumed from a checkpoint continues exactly as the uninterrupted run would.
inline TrainResult train(const TrainConfig& cfg, std::span<const PairSource> sources,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (sources.empty()) throw Error("train: no pair sources");
  TrainResult res;
  std::size_t first_epoch = 0;
  if (cfg.resume_from) {
    ModelFile f = load_model_file(*cfg.resume_from);
    if (!f.training) throw Error("train: checkpoint has no optimizer state");
    res.model = std::move(f.model);
    res.optimizer = f.training->optimizer;
    first_epoch = static_cast<std::size_t>(f.training->epoch);
  } else {
    res.model = build_model(cfg.arch, cfg.seed);
    res.optimizer = AdadeltaState(res.model.param_count());
  }
  if (first_epoch >= cfg.epochs) return res;

  const auto heldout = make_heldout_set(sources, cfg.heldout_count, cfg.seed, cfg.sampling);
  const auto eval_heldout = [&](std::size_t epoch) {
    const auto rs = quad_responses(res.model, std::span<const Quadruple>(heldout));
    const BatchLoss bl = batch_loss(rs);
    res.log.heldout.push_back({epoch, bl.mean_loss, bl.misrank_fraction});
  };
  eval_heldout(first_epoch);

  for (std::size_t e = first_epoch; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(detail::mix_seed(cfg.seed, e));
    const EpochSample sample =
        sample_batch(sources, cfg.quads_per_pair, cfg.batch_size, rng, cfg.sampling);
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.source = sample.source;
    for (const auto& batch : sample.batches) {
      const StepResult s = train_step(res.model, res.optimizer, batch);
      rec.mean_loss += s.mean_loss / static_cast<double>(sample.batches.size());
      rec.misrank_fraction += s.misrank_fraction / static_cast<double>(sample.batches.size());
    }
    rec.rng_digest = rng.digest();
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    const bool last = e + 1 == cfg.epochs;
    if (last || (cfg.heldout_every > 0 && (e + 1) % cfg.heldout_every == 0)) eval_heldout(e + 1);
    if (cfg.checkpoint_every > 0 && ((e + 1) % cfg.checkpoint_every == 0 || last)) {
      const TrainingState ts{e + 1, res.optimizer};
      save_model(res.model, checkpoint_path(cfg, e + 1), &ts);
    }
  }
  return res;
}

// Epoch rows plus held-out rows; wall time only when asked for, since it is
// the one field that differs between otherwise identical runs.
inline std::string train_log_csv(const TrainLog& log, std::uint64_t seed, bool with_timing = false) {
  std::string out = csv_header_comment(seed);
  out += with_timing ? "kind,epoch,source,mean_loss,misrank_fraction,rng_digest,wall_seconds\n"
                     : "kind,epoch,source,mean_loss,misrank_fraction,rng_digest\n";
  char line[256];
  for (const auto& h : log.heldout) {
    std::snprintf(line, sizeof line, "heldout,%zu,,%.9g,%.9g,%s\n", h.epoch, h.mean_loss,
                  h.misrank_fraction, with_timing ? "," : "");
    out += line;
  }
  for (const auto& r : log.epochs) {
    if (with_timing) {
      std::snprintf(line, sizeof line, "train,%zu,%zu,%.9g,%.9g,%016llx,%.3f\n", r.epoch, r.source,
                    r.mean_loss, r.misrank_fraction, static_cast<unsigned long long>(r.rng_digest),
                    r.wall_seconds);
    } else {
      std::snprintf(line, sizeof line, "train,%zu,%zu,%.9g,%.9g,%016llx\n", r.epoch, r.source,
                    r.mean_loss, r.misrank_fraction, static_cast<unsigned long long>(r.rng_digest));
    }
    out += line;
  }
  return out;
}

}  // namespace quadrank
