#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "model.hpp"

namespace im2sp {

struct generation {
  unit_sequence units; // excludes BOS/EOS
  bool hit_max_len = false;
  /// Sum of token log-probabilities divided by the number of scored tokens.
  double score = 0.0;
};

/// Log-probabilities of the token following [BOS, prefix...].
inline Eigen::RowVectorXd next_log_probs(const model_params &p, std::span<const unit_id> image_tokens,
                                         std::span<const unit_id> prefix) {
  detail::forward_state st;
  detail::forward(p, image_tokens, prefix, st);
  return detail::log_softmax(st.logits.bottomRows(1)).row(0);
}

namespace detail {

inline void check_generation(const model_params &p, std::span<const unit_id> image_tokens, std::size_t max_len,
                             std::size_t beam_size) {
  check_example(p.config, image_tokens, {});
  require(max_len >= 1 && max_len <= p.config.max_unit_len, "generate: max_len must be in [1, max_unit_len]");
  require(beam_size >= 1, "generate: beam_size must be >= 1");
}

// Emittable ids: the base vocabulary and EOS; BOS and PAD never are.
inline std::vector<unit_id> emittable(const model_config &c) {
  std::vector<unit_id> ids(c.base_vocab());
  for (std::size_t i = 0; i < ids.size(); ++i)
    ids[i] = static_cast<unit_id>(i);
  ids.push_back(c.eos());
  return ids;
}

} // namespace detail

/// Greedy decoding from BOS until EOS or max_len; ties go to the lowest id.
inline generation generate_greedy(const model_params &p, std::span<const unit_id> image_tokens,
                                  std::size_t max_len) {
  detail::check_generation(p, image_tokens, max_len, 1);
  const auto ids = detail::emittable(p.config);
  std::vector<unit_id> out;
  double logp = 0.0;
  std::size_t scored = 0;
  bool hit = false;
  for (;;) {
    const auto lp = next_log_probs(p, image_tokens, out);
    unit_id best = ids.front();
    for (unit_id t : ids)
      if (lp(t) > lp(best))
        best = t;
    logp += lp(best);
    ++scored;
    if (best == p.config.eos())
      break;
    out.push_back(best);
    if (out.size() == max_len) {
      hit = true;
      break;
    }
  }
  return {unit_sequence(std::move(out), static_cast<std::uint32_t>(p.config.base_vocab())), hit,
          logp / static_cast<double>(scored)};
}

/// Beam search. At each step every live hypothesis is extended by every
/// emittable token and the best beam_size candidates survive; candidates
/// ending in EOS, or reaching max_len, are finished. The result is the
/// finished hypothesis with the best length-normalised log-probability.
/// Ties go to the lexicographically smaller token sequence.
inline generation generate(const model_params &p, std::span<const unit_id> image_tokens, std::size_t max_len,
                           std::size_t beam_size = 1) {
  detail::check_generation(p, image_tokens, max_len, beam_size);
  struct hyp {
    std::vector<unit_id> tokens; // may end in EOS
    double logp = 0.0;
  };
  const auto ids = detail::emittable(p.config);
  const unit_id eos = p.config.eos();
  auto better = [](const hyp &a, const hyp &b) {
    if (a.logp != b.logp)
      return a.logp > b.logp;
    return a.tokens < b.tokens;
  };

  std::vector<hyp> live{hyp{}}, finished;
  std::vector<bool> finished_at_max;
  for (std::size_t step = 1; step <= max_len && !live.empty(); ++step) {
    std::vector<hyp> cands;
    for (const auto &h : live) {
      const auto lp = next_log_probs(p, image_tokens, h.tokens);
      for (unit_id t : ids) {
        hyp c = h;
        c.tokens.push_back(t);
        c.logp += lp(t);
        cands.push_back(std::move(c));
      }
    }
    // every candidate at this step has the same scored length
    const std::size_t keep = std::min(beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      if (cands[i].tokens.back() == eos) {
        finished.push_back(std::move(cands[i]));
        finished_at_max.push_back(false);
      } else if (step == max_len) {
        finished.push_back(std::move(cands[i]));
        finished_at_max.push_back(true);
      } else {
        live.push_back(std::move(cands[i]));
      }
    }
  }

  std::size_t best = 0;
  auto norm = [](const hyp &h) { return h.logp / static_cast<double>(h.tokens.size()); };
  for (std::size_t i = 1; i < finished.size(); ++i) {
    const double a = norm(finished[i]), b = norm(finished[best]);
    if (a > b || (a == b && finished[i].tokens < finished[best].tokens))
      best = i;
  }
  const hyp &h = finished[best];
  std::vector<unit_id> units = h.tokens;
  if (!units.empty() && units.back() == eos)
    units.pop_back();
  return {unit_sequence(std::move(units), static_cast<std::uint32_t>(p.config.base_vocab())), finished_at_max[best],
          norm(h)};
}

} // namespace im2sp
