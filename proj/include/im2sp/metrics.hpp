#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "core.hpp"

namespace im2sp {

using token_seq = std::vector<unit_id>;

/// A hypothesis and the references it is scored against.
struct eval_pair {
  token_seq hypothesis;
  std::vector<token_seq> references;
};

using ngram_counts = std::map<token_seq, std::size_t>;

inline ngram_counts count_ngrams(const token_seq &s, std::size_t n) {
  ngram_counts out;
  if (n == 0 || s.size() < n)
    return out;
  for (std::size_t i = 0; i + n <= s.size(); ++i)
    ++out[token_seq(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

namespace detail {

inline void check_corpus(std::span<const eval_pair> corpus, const char *who) {
  if (corpus.empty())
    throw invalid_argument(std::string(who) + ": empty corpus");
  for (const auto &p : corpus)
    if (p.references.empty())
      throw invalid_argument(std::string(who) + ": pair without references");
}

inline std::size_t lcs_length(const token_seq &a, const token_seq &b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

} // namespace detail

/// Corpus BLEU-4 without smoothing: clipped n-gram precisions for n = 1..4
/// pooled over the corpus, geometric mean, brevity penalty against the
/// closest reference length (ties to the shorter one).
inline double bleu4(std::span<const eval_pair> corpus) {
  detail::check_corpus(corpus, "bleu4");
  std::array<std::size_t, 4> matched{}, total{};
  std::size_t hyp_len = 0, ref_len = 0;
  for (const auto &pair : corpus) {
    const std::size_t c = pair.hypothesis.size();
    hyp_len += c;
    std::size_t best = pair.references.front().size();
    for (const auto &ref : pair.references) {
      const auto diff = [c](std::size_t r) { return r > c ? r - c : c - r; };
      if (diff(ref.size()) < diff(best) || (diff(ref.size()) == diff(best) && ref.size() < best))
        best = ref.size();
    }
    ref_len += best;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hyp = count_ngrams(pair.hypothesis, n);
      ngram_counts max_ref;
      for (const auto &ref : pair.references)
        for (const auto &[gram, cnt] : count_ngrams(ref, n))
          max_ref[gram] = std::max(max_ref[gram], cnt);
      for (const auto &[gram, cnt] : hyp) {
        total[n - 1] += cnt;
        if (auto it = max_ref.find(gram); it != max_ref.end())
          matched[n - 1] += std::min(cnt, it->second);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (matched[n] == 0)
      return 0.0;
    log_sum += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  const double bp =
      hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
  return bp * std::exp(log_sum / 4.0);
}

inline constexpr double rouge_beta_sq = 1.2;

/// LCS F-measure of one hypothesis against one reference.
inline double rouge_l_f(const token_seq &hyp, const token_seq &ref, double beta_sq = rouge_beta_sq) {
  if (hyp.empty() || ref.empty())
    return 0.0;
  const double lcs = static_cast<double>(detail::lcs_length(hyp, ref));
  if (lcs == 0.0)
    return 0.0;
  const double p = lcs / static_cast<double>(hyp.size());
  const double r = lcs / static_cast<double>(ref.size());
  return (1.0 + beta_sq) * p * r / (r + beta_sq * p);
}

/// Per-pair best ROUGE-L F over the references, averaged over the corpus.
inline double rouge_l(std::span<const eval_pair> corpus) {
  detail::check_corpus(corpus, "rouge_l");
  double sum = 0.0;
  for (const auto &pair : corpus) {
    double best = 0.0;
    for (const auto &ref : pair.references)
      best = std::max(best, rouge_l_f(pair.hypothesis, ref));
    sum += best;
  }
  return sum / static_cast<double>(corpus.size());
}

/// Per-pair CIDEr scores (no length penalty, no count clipping).
///
/// Each sequence becomes a tf-idf vector per n-gram order n = 1..4 with raw
/// term counts and idf = log(N / max(1, df)), df counting the pairs whose
/// reference set contains the n-gram. The score is the mean cosine against
/// each reference, averaged over n and scaled by 10.
inline std::vector<double> cider_scores(std::span<const eval_pair> corpus) {
  detail::check_corpus(corpus, "cider");
  const double log_n = std::log(static_cast<double>(corpus.size()));
  std::array<std::map<token_seq, std::size_t>, 4> df;
  for (const auto &pair : corpus)
    for (std::size_t n = 1; n <= 4; ++n) {
      std::set<token_seq> seen;
      for (const auto &ref : pair.references)
        for (const auto &entry : count_ngrams(ref, n))
          seen.insert(entry.first);
      for (const auto &g : seen)
        ++df[n - 1][g];
    }

  using weights = std::map<token_seq, double>;
  auto vectorize = [&](const token_seq &s, std::size_t n) {
    weights v;
    for (const auto &[gram, cnt] : count_ngrams(s, n)) {
      auto it = df[n - 1].find(gram);
      const double d = it == df[n - 1].end() ? 1.0 : static_cast<double>(std::max<std::size_t>(1, it->second));
      v[gram] = static_cast<double>(cnt) * (log_n - std::log(d));
    }
    return v;
  };
  auto norm = [](const weights &v) {
    double s = 0.0;
    for (const auto &e : v)
      s += e.second * e.second;
    return std::sqrt(s);
  };
  auto cosine = [&](const weights &a, const weights &b) {
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0)
      return 0.0;
    double dot = 0.0;
    for (const auto &[gram, w] : a)
      if (auto it = b.find(gram); it != b.end())
        dot += w * it->second;
    return dot / (na * nb);
  };

  std::vector<double> scores;
  scores.reserve(corpus.size());
  for (const auto &pair : corpus) {
    double total = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
      const weights h = vectorize(pair.hypothesis, n);
      double s = 0.0;
      for (const auto &ref : pair.references)
        s += cosine(h, vectorize(ref, n));
      total += s / static_cast<double>(pair.references.size());
    }
    scores.push_back(10.0 * total / 4.0);
  }
  return scores;
}

inline double cider(std::span<const eval_pair> corpus) {
  const auto s = cider_scores(corpus);
  double sum = 0.0;
  for (double v : s)
    sum += v;
  return sum / static_cast<double>(s.size());
}

struct metric_report {
  std::size_t pairs = 0;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
};

inline metric_report evaluate(std::span<const eval_pair> corpus) {
  return {corpus.size(), bleu4(corpus), rouge_l(corpus), cider(corpus)};
}

inline std::string format_table(const metric_report &r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %10s\n%-10s %10zu\n%-10s %10.4f\n%-10s %10.4f\n%-10s %10.4f\n", "metric",
                "value", "pairs", r.pairs, "BLEU-4", r.bleu4, "ROUGE-L", r.rouge_l, "CIDEr", r.cider);
  return buf;
}

inline std::string format_key_values(const metric_report &r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "pairs=%zu\nbleu4=%.10f\nrouge_l=%.10f\ncider=%.10f\n", r.pairs, r.bleu4, r.rouge_l,
                r.cider);
  return buf;
}

} // namespace im2sp
