#pragma once

#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "peeler/datasets.hpp"
#include "peeler/error.hpp"
#include "peeler/rng.hpp"

namespace peeler {

struct EpisodeConfig {
  std::size_t way = 5;                    // N seen classes
  std::size_t shot = 1;                   // K support samples per seen class
  std::size_t query_per_class = 15;       // Q closed queries per seen class
  std::size_t open_way = 5;               // M unseen classes
  std::size_t open_query_per_class = 15;  // Q_o open queries per unseen class

  void validate() const {
    if (way < 2) throw ConfigError("episode: way must be >= 2");
    if (shot < 1) throw ConfigError("episode: shot must be >= 1");
    if (query_per_class < 1) throw ConfigError("episode: query_per_class must be >= 1");
    if (open_way > 0 && open_query_per_class < 1) {
      throw ConfigError("episode: open_query_per_class must be >= 1 when open_way > 0");
    }
  }
};

// One open-set task. Sample fields hold dataset row indices; labels are
// episode-local positions in seen_classes.
struct Episode {
  std::vector<std::size_t> seen_classes;    // dataset class ids
  std::vector<std::size_t> unseen_classes;  // dataset class ids
  std::vector<std::size_t> seen_slots;      // large-scale only: positions of seen classes in the pool

  std::vector<std::size_t> support;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> closed_query;
  std::vector<std::size_t> closed_labels;
  std::vector<std::size_t> open_query;

  std::size_t way() const { return seen_classes.size(); }
};

namespace detail {

// Partial Fisher-Yates: k distinct elements in random order.
template <typename T>
std::vector<T> draw_without_replacement(std::span<const T> items, std::size_t k, Rng& rng) {
  std::vector<T> v(items.begin(), items.end());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, v.size() - 1);
    std::swap(v[i], v[pick(rng)]);
  }
  v.resize(k);
  return v;
}

}  // namespace detail

// Draws N+M distinct classes from the pool in one draw; the first N are seen.
inline Episode sample_fewshot_episode(const LabeledDataset& ds, std::span<const std::size_t> pool,
                                      const EpisodeConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t need = cfg.way + cfg.open_way;
  if (pool.size() < need) {
    throw DataError("episode: class pool has " + std::to_string(pool.size()) + " classes, need " +
                    std::to_string(need) + " (way " + std::to_string(cfg.way) + " + open_way " +
                    std::to_string(cfg.open_way) + ")");
  }
  for (auto c : pool) {
    if (c >= ds.n_classes()) throw DataError("episode: pool class " + std::to_string(c) + " not in dataset");
  }
  const auto classes = detail::draw_without_replacement(pool, need, rng);

  Episode ep;
  ep.seen_classes.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(cfg.way));
  ep.unseen_classes.assign(classes.begin() + static_cast<std::ptrdiff_t>(cfg.way), classes.end());

  const std::size_t per_seen = cfg.shot + cfg.query_per_class;
  for (std::size_t k = 0; k < ep.seen_classes.size(); ++k) {
    const auto& members = ds.class_index[ep.seen_classes[k]];
    if (members.size() < per_seen) {
      throw DataError("episode: class " + std::to_string(ep.seen_classes[k]) + " has " +
                      std::to_string(members.size()) + " samples, need " + std::to_string(per_seen));
    }
    const auto drawn = detail::draw_without_replacement<std::size_t>(members, per_seen, rng);
    for (std::size_t s = 0; s < per_seen; ++s) {
      if (s < cfg.shot) {
        ep.support.push_back(drawn[s]);
        ep.support_labels.push_back(k);
      } else {
        ep.closed_query.push_back(drawn[s]);
        ep.closed_labels.push_back(k);
      }
    }
  }
  for (auto c : ep.unseen_classes) {
    const auto& members = ds.class_index[c];
    if (members.size() < cfg.open_query_per_class) {
      throw DataError("episode: unseen class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                      " samples, need " + std::to_string(cfg.open_query_per_class));
    }
    const auto drawn = detail::draw_without_replacement<std::size_t>(members, cfg.open_query_per_class, rng);
    ep.open_query.insert(ep.open_query.end(), drawn.begin(), drawn.end());
  }
  return ep;
}

// Large-scale regime: M classes of the pool become unseen, the rest stay seen;
// no support set. `members`, when given, restricts which samples of each class
// may be drawn (indexed by class id), e.g. the training part of a holdout.
inline Episode sample_largescale_batch(const LabeledDataset& ds, std::span<const std::size_t> pool,
                                       std::size_t open_way, std::size_t batch_per_class, Rng& rng,
                                       const std::vector<std::vector<std::size_t>>* members = nullptr) {
  if (open_way < 1 || open_way >= pool.size()) {
    throw DataError("large-scale batch: open_way must be in [1, " + std::to_string(pool.size()) + "), got " +
                    std::to_string(open_way));
  }
  if (batch_per_class < 1) throw ConfigError("large-scale batch: batch_per_class must be >= 1");

  std::vector<std::size_t> slots(pool.size());
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  const auto unseen_slots = detail::draw_without_replacement<std::size_t>(slots, open_way, rng);
  std::vector<bool> is_unseen(pool.size(), false);
  for (auto s : unseen_slots) is_unseen[s] = true;

  Episode ep;
  for (std::size_t s = 0; s < pool.size(); ++s) {
    if (!is_unseen[s]) {
      ep.seen_slots.push_back(s);
      ep.seen_classes.push_back(pool[s]);
    }
  }
  for (auto s : unseen_slots) ep.unseen_classes.push_back(pool[s]);

  auto draw = [&](std::size_t cls) {
    const auto& from = members ? (*members)[cls] : ds.class_index[cls];
    if (from.size() < batch_per_class) {
      throw DataError("large-scale batch: class " + std::to_string(cls) + " has " + std::to_string(from.size()) +
                      " samples, need " + std::to_string(batch_per_class));
    }
    return detail::draw_without_replacement<std::size_t>(from, batch_per_class, rng);
  };
  for (std::size_t k = 0; k < ep.seen_classes.size(); ++k) {
    for (auto i : draw(ep.seen_classes[k])) {
      ep.closed_query.push_back(i);
      ep.closed_labels.push_back(k);
    }
  }
  for (auto c : ep.unseen_classes) {
    const auto drawn = draw(c);
    ep.open_query.insert(ep.open_query.end(), drawn.begin(), drawn.end());
  }
  return ep;
}

}  // namespace peeler
