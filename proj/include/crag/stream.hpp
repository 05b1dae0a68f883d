#pragma once

// Synthetic non-stationary urban stream. Each domain has a unit prototype and
// a linear target map; drift events rotate prototypes in a private plane and
// optionally perturb the target map. Ground-truth relevance comes from
// knowledge entries planted at every epoch (multiple of `plant_period`).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crag/core.hpp"
#include "crag/corpus.hpp"
#include "crag/json_util.hpp"
#include "crag/tensor.hpp"

namespace crag {

enum class DriftKind { Abrupt, Gradual, Seasonal };

inline std::string_view to_string(DriftKind k) {
  switch (k) {
    case DriftKind::Abrupt: return "abrupt";
    case DriftKind::Gradual: return "gradual";
    case DriftKind::Seasonal: return "seasonal";
  }
  return "abrupt";
}

inline DriftKind drift_kind_from_string(std::string_view s) {
  if (s == "abrupt") return DriftKind::Abrupt;
  if (s == "gradual") return DriftKind::Gradual;
  if (s == "seasonal") return DriftKind::Seasonal;
  throw Error(ErrorCode::InvalidArgument, "unknown drift kind '" + std::string(s) + "'");
}

struct DriftEvent {
  DriftKind kind = DriftKind::Abrupt;
  Tick onset = 0;
  /// Ramp length for gradual, period for seasonal.
  Tick duration = 1;
  /// Rotation angle in radians.
  double magnitude = 0.0;
  /// Affected domain names; empty means all.
  std::vector<std::string> domains;

  void validate() const {
    require(onset >= 0, ErrorCode::InvariantViolation, "drift onset must be >= 0");
    require(duration >= 1, ErrorCode::InvariantViolation, "drift duration must be >= 1");
    require(std::isfinite(magnitude), ErrorCode::InvariantViolation,
            "drift magnitude must be finite");
  }

  double angle(Tick t) const {
    if (t < onset) return 0.0;
    switch (kind) {
      case DriftKind::Abrupt: return magnitude;
      case DriftKind::Gradual:
        return magnitude * std::min(1.0, static_cast<double>(t - onset) /
                                             static_cast<double>(duration));
      case DriftKind::Seasonal: {
        const Tick phase = (t - onset) % duration;
        return magnitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(phase) /
                                    static_cast<double>(duration));
      }
    }
    return 0.0;
  }

  bool affects(const std::string& domain) const {
    return domains.empty() || std::find(domains.begin(), domains.end(), domain) != domains.end();
  }
};

struct DomainSpec {
  std::string name;
  double sigma = 0.1;
  double mixture = 1.0;
  std::vector<std::string> vocabulary;
  /// Filled by the stream from the seed.
  Vec prototype;
  Matrix<double> target_map;

  void validate() const {
    require(!name.empty(), ErrorCode::InvariantViolation, "domain name must be nonempty");
    require(sigma > 0.0, ErrorCode::InvariantViolation, "domain sigma must be > 0");
    require(mixture > 0.0, ErrorCode::InvariantViolation, "domain mixture must be > 0");
  }
};

inline std::vector<DomainSpec> default_domains() {
  return {
      {"traffic", 0.1, 1.0, {"congestion", "signal", "lane", "peak", "commute", "bus"}, {}, {}},
      {"safety", 0.1, 1.0, {"incident", "patrol", "alert", "hazard", "response", "camera"}, {}, {}},
      {"planning", 0.1, 1.0, {"zoning", "permit", "height", "setback", "parcel", "density"}, {}, {}},
  };
}

struct StreamConfig {
  std::size_t dim = 8;
  std::size_t output_dim = 4;
  std::vector<DomainSpec> domains = default_domains();
  std::vector<DriftEvent> drift_events;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  /// Drift also perturbs target maps by angle * B.
  bool concept_drift = false;
  Tick plant_period = 5;
  std::size_t distractors_per_domain = 3;
  double distractor_relevance = 0.05;
  double planted_relevance = 1.0;
  /// Mirror of the corpus merge threshold, used to derive ground truth.
  double redundancy_threshold = 0.95;

  void validate() const {
    require(!domains.empty(), ErrorCode::InvariantViolation, "stream needs at least one domain");
    require(dim >= 2 * domains.size(), ErrorCode::InvariantViolation,
            "stream dim must be >= 2 * number of domains");
    require(output_dim >= 1, ErrorCode::InvariantViolation, "output_dim must be >= 1");
    require(batch_size >= 1, ErrorCode::InvariantViolation, "batch_size must be >= 1");
    require(plant_period >= 1, ErrorCode::InvariantViolation, "plant_period must be >= 1");
    for (const auto& d : domains) d.validate();
    for (const auto& e : drift_events) e.validate();
  }
};

struct StreamSample {
  Vec x;
  std::string text;
  Vec y;
  std::size_t domain = 0;
  std::vector<EntryId> relevant;
};

struct StreamBatch {
  Tick tick = 0;
  std::vector<StreamSample> samples;

  std::size_t size() const { return samples.size(); }
};

inline constexpr EntryId kPlantedIdBase = 1'000'000;
inline constexpr EntryId kDistractorIdBase = 900'000'000;

inline EntryId planted_id(std::size_t domain, Tick epoch) {
  return kPlantedIdBase * (domain + 1) + static_cast<EntryId>(epoch);
}

inline EntryId distractor_id(std::size_t domain, std::size_t i) {
  return kDistractorIdBase + 1000 * domain + i;
}

class Stream {
 public:
  explicit Stream(StreamConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.seed ^ 0x5eedULL);
    const std::size_t m = config_.domains.size();
    std::normal_distribution<double> normal(0.0, 1.0);
    // Gram-Schmidt over 2M random directions: prototypes then rotation partners.
    std::vector<Vec> basis;
    while (basis.size() < 2 * m) {
      Vec v(config_.dim);
      for (double& x : v) x = normal(rng);
      for (const Vec& b : basis) {
        const double p = dot(v, b);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= p * b[i];
      }
      if (norm2(v) > 1e-6) basis.push_back(normalized(v));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(config_.dim));
    for (std::size_t d = 0; d < m; ++d) {
      config_.domains[d].prototype = basis[d];
      partners_.push_back(basis[m + d]);
      config_.domains[d].target_map = random_matrix(config_.output_dim, config_.dim, scale, rng);
      perturbations_.push_back(random_matrix(config_.output_dim, config_.dim, scale, rng));
    }
  }

  const StreamConfig& config() const { return config_; }
  std::size_t domain_count() const { return config_.domains.size(); }

  std::size_t domain_index(const std::string& name) const {
    for (std::size_t d = 0; d < config_.domains.size(); ++d) {
      if (config_.domains[d].name == name) return d;
    }
    throw Error(ErrorCode::InvalidArgument, "unknown domain '" + name + "'");
  }

  double angle(std::size_t domain, Tick t) const {
    double a = 0.0;
    for (const DriftEvent& e : config_.drift_events) {
      if (e.affects(config_.domains[domain].name)) a += e.angle(t);
    }
    return a;
  }

  Vec prototype(std::size_t domain, Tick t) const {
    const double a = angle(domain, t);
    const Vec& p = config_.domains[domain].prototype;
    const Vec& o = partners_[domain];
    Vec v(p.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::cos(a) * p[i] + std::sin(a) * o[i];
    return v;
  }

  Matrix<double> target_map(std::size_t domain, Tick t) const {
    Matrix<double> a = config_.domains[domain].target_map;
    if (!config_.concept_drift) return a;
    const double angle_t = angle(domain, t);
    const auto& b = perturbations_[domain];
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += angle_t * b.data[i];
    return a;
  }

  Tick epoch(Tick t) const { return t - t % config_.plant_period; }

  /// Planted entries that survive as distinct ids (not merged at planting).
  std::vector<std::pair<Tick, Vec>> planted_heads(std::size_t domain, Tick t) const {
    std::vector<std::pair<Tick, Vec>> heads;
    for (Tick e = 0; e <= epoch(t); e += config_.plant_period) {
      Vec p = prototype(domain, e);
      bool merged = false;
      for (const auto& [tick, emb] : heads) {
        if (dot(emb, p) >= config_.redundancy_threshold) {
          merged = true;
          break;
        }
      }
      if (!merged) heads.emplace_back(e, std::move(p));
    }
    return heads;
  }

  /// Ground truth: planted heads aligned with the current prototype, else the
  /// most recent head.
  std::vector<EntryId> relevant_ids(std::size_t domain, Tick t) const {
    const auto heads = planted_heads(domain, t);
    const Vec current = prototype(domain, t);
    std::vector<EntryId> out;
    for (const auto& [tick, emb] : heads) {
      if (dot(emb, current) >= config_.redundancy_threshold) out.push_back(planted_id(domain, tick));
    }
    if (out.empty() && !heads.empty()) out.push_back(planted_id(domain, heads.back().first));
    return out;
  }

  StreamBatch next_batch(Tick t) const {
    require(t >= 0, ErrorCode::InvalidArgument, "next_batch: t must be >= 0");
    std::seed_seq seq{static_cast<std::uint32_t>(config_.seed),
                      static_cast<std::uint32_t>(config_.seed >> 32),
                      static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(t >> 32)};
    std::mt19937_64 rng(seq);
    std::vector<double> mix;
    for (const auto& d : config_.domains) mix.push_back(d.mixture);
    std::discrete_distribution<std::size_t> pick(mix.begin(), mix.end());
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<Vec> protos;
    std::vector<Matrix<double>> maps;
    std::vector<std::vector<EntryId>> relevant;
    for (std::size_t d = 0; d < domain_count(); ++d) {
      protos.push_back(prototype(d, t));
      maps.push_back(target_map(d, t));
      relevant.push_back(relevant_ids(d, t));
    }

    StreamBatch batch{t, {}};
    for (std::size_t n = 0; n < config_.batch_size; ++n) {
      const std::size_t d = pick(rng);
      const DomainSpec& spec = config_.domains[d];
      Vec x = protos[d];
      for (double& v : x) v += spec.sigma * normal(rng);
      x = normalized(x);
      std::string text = spec.name;
      if (!spec.vocabulary.empty()) {
        std::uniform_int_distribution<std::size_t> word(0, spec.vocabulary.size() - 1);
        for (int w = 0; w < 3; ++w) text += " " + spec.vocabulary[word(rng)];
      }
      Vec y = matvec(maps[d], x);
      batch.samples.push_back({std::move(x), std::move(text), std::move(y), d, relevant[d]});
    }
    return batch;
  }

 private:
  StreamConfig config_;
  std::vector<Vec> partners_;
  std::vector<Matrix<double>> perturbations_;
};

inline StreamBatch next_batch(Tick t, const StreamConfig& config, std::uint64_t seed) {
  StreamConfig c = config;
  c.seed = seed;
  return Stream(std::move(c)).next_batch(t);
}

struct DiagGaussian {
  Vec mean;
  Vec var;
};

inline constexpr double kVarianceFloor = 1e-6;

inline DiagGaussian fit_gaussian(std::span<const Vec> xs) {
  require(!xs.empty(), ErrorCode::InvalidArgument, "fit_gaussian: no samples");
  const std::size_t d = xs.front().size();
  DiagGaussian g{Vec(d, 0.0), Vec(d, 0.0)};
  for (const Vec& x : xs) {
    require(x.size() == d, ErrorCode::DimensionMismatch, "fit_gaussian: ragged samples");
    for (std::size_t i = 0; i < d; ++i) g.mean[i] += x[i];
  }
  for (double& m : g.mean) m /= static_cast<double>(xs.size());
  for (const Vec& x : xs) {
    for (std::size_t i = 0; i < d; ++i) g.var[i] += (x[i] - g.mean[i]) * (x[i] - g.mean[i]);
  }
  for (double& v : g.var) v = std::max(kVarianceFloor, v / static_cast<double>(xs.size()));
  return g;
}

/// KL(a || b) for diagonal Gaussians.
inline double kl_divergence(const DiagGaussian& a, const DiagGaussian& b) {
  require(a.mean.size() == b.mean.size(), ErrorCode::DimensionMismatch, "kl: dimension");
  double kl = 0.0;
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    const double diff = b.mean[i] - a.mean[i];
    kl += a.var[i] / b.var[i] + diff * diff / b.var[i] - 1.0 + std::log(b.var[i] / a.var[i]);
  }
  return std::max(0.0, 0.5 * kl);
}

inline double estimate_divergence(const StreamBatch& a, const StreamBatch& b) {
  require(a.size() > 0 && b.size() > 0, ErrorCode::InvalidArgument,
          "estimate_divergence: empty batch");
  std::vector<Vec> xa;
  std::vector<Vec> xb;
  for (const auto& s : a.samples) xa.push_back(s.x);
  for (const auto& s : b.samples) xb.push_back(s.x);
  return kl_divergence(fit_gaussian(xa), fit_gaussian(xb));
}

/// Plants one entry per domain for the epoch containing t (and the
/// distractors once, at t = 0). Returns the ids reported by the corpus.
inline std::vector<EntryId> plant_knowledge(Corpus& corpus, Tick t, const Stream& stream) {
  const StreamConfig& cfg = stream.config();
  require(corpus.config().dim == cfg.dim, ErrorCode::DimensionMismatch,
          "plant_knowledge: corpus dim differs from stream dim");
  std::vector<EntryId> ids;
  auto put = [&](KnowledgeEntry e) {
    const IngestResult r = corpus.ingest(e, t);
    if (r.status == IngestStatus::Rejected) {
      throw Error(r.reason == RejectReason::DuplicateId ? ErrorCode::DuplicateId
                                                        : ErrorCode::InvariantViolation,
                  "plant_knowledge: entry " + std::to_string(e.id) + " rejected");
    }
    ids.push_back(r.id);
  };
  const Tick epoch = stream.epoch(t);
  for (std::size_t d = 0; d < stream.domain_count(); ++d) {
    const std::string& name = cfg.domains[d].name;
    put({planted_id(d, epoch), stream.prototype(d, epoch),
         name + " bulletin epoch " + std::to_string(epoch), name,
         {{name, cfg.planted_relevance}}, t, t, 0.0, "stream"});
  }
  if (t == 0) {
    std::mt19937_64 rng(cfg.seed ^ 0xd157ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t d = 0; d < stream.domain_count(); ++d) {
      const std::string& name = cfg.domains[d].name;
      for (std::size_t i = 0; i < cfg.distractors_per_domain; ++i) {
        Vec v(cfg.dim);
        for (double& x : v) x = normal(rng);
        put({distractor_id(d, i), normalized(v), name + " archive note " + std::to_string(i),
             name, {{name, cfg.distractor_relevance}}, t, t, 0.0, "stream"});
      }
    }
  }
  return ids;
}

inline nlohmann::json to_json(const StreamBatch& batch) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : batch.samples) {
    samples.push_back({{"x", s.x}, {"text", s.text}, {"y", s.y}, {"domain", s.domain},
                       {"relevant", s.relevant}});
  }
  return {{"tick", batch.tick}, {"samples", samples}};
}

inline void write_batches(std::ostream& out, std::span<const StreamBatch> batches) {
  for (const auto& b : batches) out << to_json(b).dump() << '\n';
}

inline StreamConfig stream_config_from_json(const nlohmann::json& j, const std::string& path) {
  StreamConfig c;
  c.dim = get_key<std::size_t>(j, "dim", path, c.dim);
  c.output_dim = get_key<std::size_t>(j, "output_dim", path, c.output_dim);
  c.batch_size = get_key<std::size_t>(j, "batch_size", path, c.batch_size);
  c.seed = get_key<std::uint64_t>(j, "seed", path, c.seed);
  c.concept_drift = get_key<bool>(j, "concept_drift", path, c.concept_drift);
  c.plant_period = get_key<Tick>(j, "plant_period", path, c.plant_period);
  c.distractors_per_domain =
      get_key<std::size_t>(j, "distractors_per_domain", path, c.distractors_per_domain);
  c.redundancy_threshold = get_key<double>(j, "redundancy_threshold", path, c.redundancy_threshold);
  if (j.contains("domains")) {
    c.domains.clear();
    const auto& arr = j.at("domains");
    require(arr.is_array(), ErrorCode::ParseError,
            "config key '" + join_key(path, "domains") + "' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = join_key(path, "domains[" + std::to_string(i) + "]");
      DomainSpec d;
      d.name = get_key<std::string>(arr[i], "name", p);
      d.sigma = get_key<double>(arr[i], "sigma", p, d.sigma);
      d.mixture = get_key<double>(arr[i], "mixture", p, d.mixture);
      d.vocabulary = get_key<std::vector<std::string>>(arr[i], "vocabulary", p, {});
      check_key(p, [&] { d.validate(); });
      c.domains.push_back(std::move(d));
    }
  }
  if (j.contains("drift_events")) {
    const auto& arr = j.at("drift_events");
    require(arr.is_array(), ErrorCode::ParseError,
            "config key '" + join_key(path, "drift_events") + "' must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = join_key(path, "drift_events[" + std::to_string(i) + "]");
      DriftEvent e;
      const auto kind = get_key<std::string>(arr[i], "kind", p);
      check_key(join_key(p, "kind"), [&] { e.kind = drift_kind_from_string(kind); });
      e.onset = get_key<Tick>(arr[i], "onset", p);
      e.duration = get_key<Tick>(arr[i], "duration", p, e.duration);
      e.magnitude = get_key<double>(arr[i], "magnitude", p);
      e.domains = get_key<std::vector<std::string>>(arr[i], "domains", p, {});
      check_key(p, [&] { e.validate(); });
      c.drift_events.push_back(std::move(e));
    }
  }
  check_key(path, [&] { c.validate(); });
  return c;
}

}  // namespace crag
