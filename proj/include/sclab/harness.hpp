// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

// Evaluation harness: prompts, greedy decoding, perplexity sweeps, passkey
// grids and capacity-law fits.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sclab/diagnostics.hpp"
#include "sclab/mitigation.hpp"
#include "sclab/model.hpp"
#include "sclab/model_io.hpp"
#include "sclab/types.hpp"

namespace sclab {

// ---------------------------------------------------------------------------
// Model interface
// ---------------------------------------------------------------------------

/// One stream of a language model. Not thread-safe; one owner per session.
class Session {
 public:
  using Sink = std::function<void(std::size_t index, const Eigen::RowVectorXd& logits)>;

  virtual ~Session() = default;
  /// Consumes `tokens`; `sink` receives the logits predicting the token after
  /// tokens[index] (all of them, only the last, or none).
  virtual void feed(std::span<const TokenId> tokens, LogitsMode mode, const Sink& sink) = 0;
};

/// Anything that can open sessions. Implementations must allow concurrent
/// new_session() calls and concurrent use of distinct sessions.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::unique_ptr<Session> new_session() const = 0;
};

/// The recurrent model under a fixed mitigation.
template <typename S>
class SsmLanguageModel final : public LanguageModel {
 public:
  SsmLanguageModel(std::shared_ptr<const ModelParams<S>> params, MitigationConfig mitigation,
                   std::size_t chunk_size = 64);

  std::size_t vocab_size() const override { return params_->config.vocab_size; }
  std::unique_ptr<Session> new_session() const override;

  const ModelParams<S>& params() const { return *params_; }
  const MitigationConfig& mitigation() const { return mitigation_; }

 private:
  std::shared_ptr<const ModelParams<S>> params_;
  MitigationConfig mitigation_;
  std::size_t chunk_size_;
};

/// Index of the largest finite logit; ties go to the lowest id. Throws
/// NumericError when no logit is finite.
TokenId argmax_token(const Eigen::RowVectorXd& logits);

/// Greedy decoding of up to `max_new` tokens after `prompt`; stops early
/// after emitting `eos`.
std::vector<TokenId> greedy_generate(Session& session, std::span<const TokenId> prompt,
                                     std::size_t max_new, std::optional<TokenId> eos = {});
std::vector<TokenId> greedy_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                                     std::size_t max_new, std::optional<TokenId> eos = {});

// ---------------------------------------------------------------------------
// Token streams
// ---------------------------------------------------------------------------

class TokenSource {
 public:
  virtual ~TokenSource() = default;
  virtual std::size_t size() const = 0;
  /// Fills up to out.size() tokens; returns how many were written (0 at end).
  virtual std::size_t read(std::span<TokenId> out) = 0;
};

/// T copies of the newline id, generated on the fly in constant memory.
class NewlinesSource final : public TokenSource {
 public:
  NewlinesSource(std::size_t length, TokenId newline_id);
  std::size_t size() const override { return length_; }
  std::size_t read(std::span<TokenId> out) override;

 private:
  std::size_t length_;
  std::size_t pos_ = 0;
  TokenId id_;
};

class VectorSource final : public TokenSource {
 public:
  explicit VectorSource(std::vector<TokenId> ids) : ids_(std::move(ids)) {}
  std::size_t size() const override { return ids_.size(); }
  std::size_t read(std::span<TokenId> out) override;

 private:
  std::vector<TokenId> ids_;
  std::size_t pos_ = 0;
};

/// The newlines prompt as a materialized vector (exactly T ids).
std::vector<TokenId> gen_newlines(std::size_t length, const Tokenizer& tokenizer);

inline constexpr std::size_t kMinDocumentTokens = 16384;

/// Concatenation of the documents with at least `min_tokens` tokens, in
/// order, each followed by `separator` when given.
std::vector<TokenId> assemble_documents(const std::vector<std::vector<TokenId>>& documents,
                                        std::size_t min_tokens = kMinDocumentTokens,
                                        std::optional<TokenId> separator = {});

// ---------------------------------------------------------------------------
// Perplexity by position
// ---------------------------------------------------------------------------

struct PplOptions {
  std::size_t window = kDefaultSmoothing;
  /// Prepended so the first stream token is scored too. Without it the
  /// curve covers positions 2..T.
  std::optional<TokenId> bos;
  std::size_t block = 4096;  // tokens fed per call
};

/// log-sum-exp(logits) - logits[target], in double.
double token_nll(const Eigen::RowVectorXd& logits, TokenId target);

/// Streams `source` through one session and returns per-token NLL plus the
/// smoothed curve. Throws UsageError when fewer scored tokens than `window`.
PerplexityCurve eval_ppl_by_position(const LanguageModel& model, TokenSource& source,
                                     const PplOptions& options = {});

// ---------------------------------------------------------------------------
// Passkey retrieval
// ---------------------------------------------------------------------------

struct PasskeySample {
  std::size_t length = 0;          // requested context length T
  std::size_t needle_index = 0;    // i
  std::size_t num_needles = 0;     // n
  std::size_t target_position = 0; // max(0, floor(T i / n) - 1)
  std::size_t needle_position = 0; // token offset where the needle starts
  std::string passkey;
  std::vector<TokenId> ids;
  std::size_t answer_begin = 0;    // token span of the needle sentence pair
  std::size_t answer_end = 0;
};

/// Five-digit key in [10000, 99999] drawn from a seeded generator.
std::string draw_passkey(std::uint64_t seed);

/// Builds the prompt with whole filler sentences so that its length is
/// within 2% of T. Byte tokenizer only. Throws UsageError when T cannot hold
/// the fixed parts or when i >= n.
PasskeySample gen_passkey(std::size_t length, std::size_t num_needles, std::size_t needle_index,
                          const std::string& passkey, const Tokenizer& tokenizer);

/// First five consecutive digits in `text`, if any.
std::optional<std::string> extract_passkey(const std::string& text);

inline constexpr std::size_t kLastRWindows[] = {1024, 2048, 4096, 8192};

struct PasskeyOptions {
  std::vector<std::size_t> lengths;
  std::size_t positions = 10;
  std::size_t samples = 20;
  std::uint64_t seed = 0;
  std::size_t max_new = 8;
  std::size_t threads = 1;
};

struct AccuracyGrid {
  std::vector<std::size_t> lengths;
  std::size_t positions = 0;
  /// [length][position] fraction of correct samples.
  std::vector<std::vector<double>> accuracy;
  std::vector<std::vector<std::size_t>> counts;
  std::vector<std::vector<std::size_t>> failures;  // samples whose generation threw
  /// r -> [length] accuracy over cells whose needle sits in the last r
  /// tokens; NaN when no cell qualifies.
  std::map<std::size_t, std::vector<double>> last_r;

  double mean_accuracy(std::size_t length_index) const;
};

/// Every (length, position, sample) cell is independent with its own seed;
/// cells run on up to `threads` workers and the result does not depend on
/// the thread count.
AccuracyGrid eval_passkey(const LanguageModel& model, const Tokenizer& tokenizer,
                          const PasskeyOptions& options);

inline constexpr double kPasskeyCapacityThreshold = 0.95;

/// Largest evaluated length whose mean accuracy over positions reaches
/// `threshold`; nullopt when none does.
std::optional<std::size_t> measure_capacity_passkey(const AccuracyGrid& grid,
                                                    double threshold = kPasskeyCapacityThreshold);

/// Heatmap CSV: rows are needle depths, columns are lengths.
void write_grid_csv(std::ostream& os, const AccuracyGrid& grid);
std::string grid_to_json(const AccuracyGrid& grid);

// ---------------------------------------------------------------------------
// Capacity laws
// ---------------------------------------------------------------------------

enum class CapacityLaw { kLinear, kExponential };
std::string to_string(CapacityLaw law);
CapacityLaw parse_capacity_law(const std::string& s);

struct CapacityPoint {
  double state_size = 0.0;
  double length = 0.0;
};

struct CapacityFit {
  CapacityLaw law = CapacityLaw::kLinear;
  /// Linear: T = slope * S + intercept.
  /// Exponential: T = exp(intercept + slope * S), fitted on log T.
  double slope = 0.0;
  double intercept = 0.0;
  std::vector<double> residuals;  // in the fitted space (T or log T)
  double rss = 0.0;
  std::vector<CapacityPoint> points;
  std::string state_unit;
  std::string length_unit;

  double predict(double state_size) const;
};

/// Least squares via Householder QR. Throws UsageError with fewer than two
/// points, when every S is equal, or (exponential) when some T <= 0.
CapacityFit fit_capacity_law(const std::vector<CapacityPoint>& points, CapacityLaw law,
                             std::string state_unit = {}, std::string length_unit = {});

/// CSV with a header naming the two columns (state_size,length); any extra
/// columns are ignored.
std::vector<CapacityPoint> read_capacity_points(std::istream& is);
std::string fit_to_json(const CapacityFit& fit);

}  // namespace sclab
