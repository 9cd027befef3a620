// Copyright (c) 2026, The sclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "sclab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <random>
#include <regex>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace sclab {
namespace {

using ordered_json = nlohmann::ordered_json;

template <typename S>
class SsmSession final : public Session {
 public:
  SsmSession(std::shared_ptr<const ModelParams<S>> params, const MitigationConfig& m,
             std::size_t chunk)
      : params_(std::move(params)), mitigation_(m), state_(make_stream_state(*params_, m)) {
    options_.chunk_size = chunk;
  }

  void feed(std::span<const TokenId> tokens, LogitsMode mode, const Sink& sink) override {
    ForwardOptions<S> opt = options_;
    opt.logits = mode;
    forward_sequence<S>(*params_, state_, tokens, mitigation_, opt,
                        [&](std::size_t i, const RowVector<S>& logits) {
                          if constexpr (std::is_same_v<S, double>) {
                            sink(i, logits);
                          } else {
                            sink(i, logits.template cast<double>());
                          }
                        });
  }

 private:
  std::shared_ptr<const ModelParams<S>> params_;
  MitigationConfig mitigation_;
  StreamState<S> state_;
  ForwardOptions<S> options_;
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t cell_seed(std::uint64_t seed, std::size_t length, std::size_t pos, std::size_t sample) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ length);
  h = splitmix64(h ^ pos);
  return splitmix64(h ^ sample);
}

const char* const kPreamble =
    "There is important info hidden inside a lot of irrelevant text. Find it and memorize it.\n\n";
const char* const kFiller[] = {"The grass is green.", "The sky is blue.", "The sun is yellow.",
                               "Here we go.", "There and back again."};
constexpr std::size_t kFillerPerLine = 5;
const char* const kQuery = "\nWhat is the passkey? The passkey is";

std::string filler_unit(std::size_t j) {
  const std::size_t k = j % kFillerPerLine;
  return std::string(kFiller[k]) + (k + 1 == kFillerPerLine ? "\n" : " ");
}

std::string needle_text(const std::string& key) {
  return "The passkey is " + key + ". Remember it. " + key + " is the passkey.\n";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  return out;
}

ordered_json num(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename S>
SsmLanguageModel<S>::SsmLanguageModel(std::shared_ptr<const ModelParams<S>> params,
                                      MitigationConfig mitigation, std::size_t chunk_size)
    : params_(std::move(params)), mitigation_(std::move(mitigation)), chunk_size_(chunk_size) {
  validate(mitigation_);
}

template <typename S>
std::unique_ptr<Session> SsmLanguageModel<S>::new_session() const {
  return std::make_unique<SsmSession<S>>(params_, mitigation_, chunk_size_);
}

template class SsmLanguageModel<float>;
template class SsmLanguageModel<double>;

TokenId argmax_token(const Eigen::RowVectorXd& logits) {
  Eigen::Index best = -1;
  double best_v = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double v = logits(i);
    if (!std::isfinite(v)) continue;
    if (best < 0 || v > best_v) {
      best = i;
      best_v = v;
    }
  }
  if (best < 0) throw NumericError("no finite logit to decode", 0, 0, 0);
  return static_cast<TokenId>(best);
}

std::vector<TokenId> greedy_generate(Session& session, std::span<const TokenId> prompt,
                                     std::size_t max_new, std::optional<TokenId> eos) {
  if (prompt.empty()) throw UsageError("greedy_generate needs a non-empty prompt");
  std::vector<TokenId> out;
  if (max_new == 0) return out;
  Eigen::RowVectorXd last;
  const Session::Sink keep = [&](std::size_t, const Eigen::RowVectorXd& l) { last = l; };
  session.feed(prompt, LogitsMode::kLast, keep);
  while (true) {
    const TokenId next = argmax_token(last);
    out.push_back(next);
    if ((eos && next == *eos) || out.size() == max_new) break;
    const TokenId one[1] = {next};
    session.feed(std::span<const TokenId>(one, 1), LogitsMode::kLast, keep);
  }
  return out;
}

std::vector<TokenId> greedy_generate(const LanguageModel& model, std::span<const TokenId> prompt,
                                     std::size_t max_new, std::optional<TokenId> eos) {
  auto session = model.new_session();
  return greedy_generate(*session, prompt, max_new, eos);
}

// ---------------------------------------------------------------------------

NewlinesSource::NewlinesSource(std::size_t length, TokenId newline_id)
    : length_(length), id_(newline_id) {}

std::size_t NewlinesSource::read(std::span<TokenId> out) {
  const std::size_t n = std::min(out.size(), length_ - pos_);
  std::fill_n(out.begin(), n, id_);
  pos_ += n;
  return n;
}

std::size_t VectorSource::read(std::span<TokenId> out) {
  const std::size_t n = std::min(out.size(), ids_.size() - pos_);
  std::copy_n(ids_.begin() + static_cast<std::ptrdiff_t>(pos_), n, out.begin());
  pos_ += n;
  return n;
}

std::vector<TokenId> gen_newlines(std::size_t length, const Tokenizer& tokenizer) {
  if (length == 0) throw UsageError("the newlines prompt needs at least one token");
  return std::vector<TokenId>(length, tokenizer.newline_id());
}

std::vector<TokenId> assemble_documents(const std::vector<std::vector<TokenId>>& documents,
                                        std::size_t min_tokens, std::optional<TokenId> separator) {
  std::vector<TokenId> out;
  for (const auto& d : documents) {
    if (d.size() < min_tokens) continue;
    out.insert(out.end(), d.begin(), d.end());
    if (separator) out.push_back(*separator);
  }
  return out;
}

// ---------------------------------------------------------------------------

double token_nll(const Eigen::RowVectorXd& logits, TokenId target) {
  if (target >= static_cast<std::size_t>(logits.size())) {
    throw DataError("target token " + std::to_string(target) + " is outside the logits");
  }
  const double m = logits.maxCoeff();
  if (!std::isfinite(m)) return std::numeric_limits<double>::quiet_NaN();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  return lse - logits(static_cast<Eigen::Index>(target));
}

PerplexityCurve eval_ppl_by_position(const LanguageModel& model, TokenSource& source,
                                     const PplOptions& options) {
  const std::size_t scored = options.bos ? source.size() : (source.size() ? source.size() - 1 : 0);
  if (scored < options.window) {
    throw UsageError("stream scores " + std::to_string(scored) +
                     " positions, fewer than the smoothing window " + std::to_string(options.window));
  }
  auto session = model.new_session();
  std::vector<double> nll;
  nll.reserve(scored);
  std::optional<Eigen::RowVectorXd> pending;
  if (options.bos) {
    const TokenId one[1] = {*options.bos};
    session->feed(std::span<const TokenId>(one, 1), LogitsMode::kLast,
                  [&](std::size_t, const Eigen::RowVectorXd& l) { pending = l; });
  }
  std::vector<TokenId> block(std::max<std::size_t>(1, options.block));
  while (true) {
    const std::size_t n = source.read(block);
    if (n == 0) break;
    const std::span<const TokenId> chunk(block.data(), n);
    if (pending) nll.push_back(token_nll(*pending, chunk[0]));
    pending.reset();
    session->feed(chunk, LogitsMode::kAll, [&](std::size_t i, const Eigen::RowVectorXd& l) {
      if (i + 1 < n) {
        nll.push_back(token_nll(l, chunk[i + 1]));
      } else {
        pending = l;
      }
    });
  }
  return PerplexityCurve::from_nll(std::move(nll), options.window);
}

// ---------------------------------------------------------------------------

std::string draw_passkey(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dist(10000, 99999);
  return std::to_string(dist(rng));
}

PasskeySample gen_passkey(std::size_t length, std::size_t num_needles, std::size_t needle_index,
                          const std::string& passkey, const Tokenizer& tokenizer) {
  if (tokenizer.mode() != TokenizerMode::kByte) {
    throw UsageError("passkey prompts can only be rendered with the byte tokenizer");
  }
  if (num_needles == 0 || needle_index >= num_needles) {
    throw UsageError("needle index must satisfy 0 <= i < n");
  }
  if (passkey.size() != 5 || !std::all_of(passkey.begin(), passkey.end(), ::isdigit) ||
      passkey[0] == '0') {
    throw UsageError("passkey must be a five-digit number in [10000, 99999]");
  }
  const std::string pre = kPreamble;
  const std::string needle = needle_text(passkey);
  const std::size_t fixed = pre.size() + needle.size() + std::string(kQuery).size();
  const double tolerance = 0.02 * static_cast<double>(length);
  if (static_cast<double>(fixed) > static_cast<double>(length) + tolerance) {
    throw UsageError("context length " + std::to_string(length) +
                     " cannot hold the passkey template (" + std::to_string(fixed) + " tokens)");
  }

  // cum[m] = length of the first m filler sentences.
  std::vector<std::size_t> cum = {0};
  while (fixed + cum.back() < length) cum.push_back(cum.back() + filler_unit(cum.size() - 1).size());
  std::size_t m = cum.size() - 1;
  auto gap = [&](std::size_t k) {
    const double total = static_cast<double>(fixed + cum[k]);
    return std::abs(total - static_cast<double>(length));
  };
  if (m > 0 && gap(m - 1) <= gap(m)) --m;
  if (gap(m) > tolerance) {
    throw UsageError("context length " + std::to_string(length) +
                     " cannot be matched within 2% by whole filler sentences");
  }

  PasskeySample s;
  s.length = length;
  s.needle_index = needle_index;
  s.num_needles = num_needles;
  s.passkey = passkey;
  const std::size_t raw = length * needle_index / num_needles;
  s.target_position = raw > 0 ? raw - 1 : 0;
  std::size_t boundary = 0;
  for (std::size_t b = 1; b <= m; ++b) {
    const auto here = static_cast<double>(pre.size() + cum[b]);
    const auto best = static_cast<double>(pre.size() + cum[boundary]);
    const auto target = static_cast<double>(s.target_position);
    if (std::abs(here - target) < std::abs(best - target)) boundary = b;
  }

  std::string text = pre;
  for (std::size_t j = 0; j < boundary; ++j) text += filler_unit(j);
  s.needle_position = text.size();
  text += needle;
  for (std::size_t j = boundary; j < m; ++j) text += filler_unit(j);
  text += kQuery;
  s.ids = tokenizer.encode(text);
  tokenizer.check_ids(s.ids);
  s.answer_begin = s.needle_position;
  s.answer_end = s.needle_position + needle.size();
  return s;
}

std::optional<std::string> extract_passkey(const std::string& text) {
  static const std::regex five("[0-9]{5}");
  std::smatch m;
  if (std::regex_search(text, m, five)) return m.str();
  return std::nullopt;
}

double AccuracyGrid::mean_accuracy(std::size_t li) const {
  const auto& row = accuracy.at(li);
  if (row.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double v : row) s += v;
  return s / static_cast<double>(row.size());
}

AccuracyGrid eval_passkey(const LanguageModel& model, const Tokenizer& tokenizer,
                          const PasskeyOptions& o) {
  if (o.lengths.empty()) throw UsageError("passkey evaluation needs at least one length");
  if (o.positions == 0 || o.samples == 0) {
    throw UsageError("passkey evaluation needs positions >= 1 and samples >= 1");
  }
  AccuracyGrid g;
  g.lengths = o.lengths;
  g.positions = o.positions;
  const std::size_t nl = o.lengths.size(), np = o.positions, ns = o.samples;
  std::vector<std::uint8_t> correct(nl * np * ns, 0), failed(nl * np * ns, 0);
  std::vector<std::size_t> needle_pos(nl * np, 0), prompt_len(nl * np, 0);

  // Prompt geometry depends on (length, position) only; render it up front so
  // template errors surface before any work starts.
  for (std::size_t li = 0; li < nl; ++li) {
    for (std::size_t pi = 0; pi < np; ++pi) {
      const auto s = gen_passkey(o.lengths[li], np, pi, "10000", tokenizer);
      needle_pos[li * np + pi] = s.needle_position;
      prompt_len[li * np + pi] = s.ids.size();
    }
  }

  std::atomic<std::size_t> next{0};
  const std::size_t total = nl * np * ns;
  auto worker = [&] {
    while (true) {
      const std::size_t c = next.fetch_add(1);
      if (c >= total) return;
      const std::size_t li = c / (np * ns), pi = (c / ns) % np, si = c % ns;
      try {
        const std::string key = draw_passkey(cell_seed(o.seed, o.lengths[li], pi, si));
        const auto sample = gen_passkey(o.lengths[li], np, pi, key, tokenizer);
        const auto gen = greedy_generate(model, sample.ids, o.max_new, tokenizer.eos_id());
        const auto found = extract_passkey(tokenizer.decode(gen));
        correct[c] = found && *found == key;
      } catch (const Error&) {
        failed[c] = 1;
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(o.threads, total));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  g.accuracy.assign(nl, std::vector<double>(np, 0.0));
  g.counts.assign(nl, std::vector<std::size_t>(np, ns));
  g.failures.assign(nl, std::vector<std::size_t>(np, 0));
  for (std::size_t li = 0; li < nl; ++li) {
    for (std::size_t pi = 0; pi < np; ++pi) {
      std::size_t ok = 0;
      for (std::size_t si = 0; si < ns; ++si) {
        const std::size_t c = (li * np + pi) * ns + si;
        ok += correct[c];
        g.failures[li][pi] += failed[c];
      }
      g.accuracy[li][pi] = static_cast<double>(ok) / static_cast<double>(ns);
    }
  }
  for (std::size_t r : kLastRWindows) {
    std::vector<double> row(nl, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t li = 0; li < nl; ++li) {
      double sum = 0.0;
      std::size_t cells = 0;
      for (std::size_t pi = 0; pi < np; ++pi) {
        const std::size_t dist = prompt_len[li * np + pi] - needle_pos[li * np + pi];
        if (dist <= r) {
          sum += g.accuracy[li][pi];
          ++cells;
        }
      }
      if (cells) row[li] = sum / static_cast<double>(cells);
    }
    g.last_r[r] = std::move(row);
  }
  return g;
}

std::optional<std::size_t> measure_capacity_passkey(const AccuracyGrid& grid, double threshold) {
  std::optional<std::size_t> best;
  for (std::size_t li = 0; li < grid.lengths.size(); ++li) {
    if (grid.mean_accuracy(li) >= threshold && (!best || grid.lengths[li] > *best)) {
      best = grid.lengths[li];
    }
  }
  return best;
}

void write_grid_csv(std::ostream& os, const AccuracyGrid& g) {
  const auto old_prec = os.precision(17);
  os << "depth";
  for (auto len : g.lengths) os << ',' << len;
  os << '\n';
  for (std::size_t pi = 0; pi < g.positions; ++pi) {
    os << static_cast<double>(pi) / static_cast<double>(g.positions);
    for (std::size_t li = 0; li < g.lengths.size(); ++li) os << ',' << g.accuracy[li][pi];
    os << '\n';
  }
  os.precision(old_prec);
}

std::string grid_to_json(const AccuracyGrid& g) {
  ordered_json j;
  j["schema_version"] = 1;
  j["lengths"] = g.lengths;
  j["positions"] = g.positions;
  j["accuracy"] = g.accuracy;
  j["counts"] = g.counts;
  j["failures"] = g.failures;
  ordered_json mean = ordered_json::array();
  for (std::size_t li = 0; li < g.lengths.size(); ++li) mean.push_back(num(g.mean_accuracy(li)));
  j["mean_accuracy"] = std::move(mean);
  ordered_json last = ordered_json::object();
  for (const auto& [r, row] : g.last_r) {
    ordered_json arr = ordered_json::array();
    for (double v : row) arr.push_back(num(v));
    last[std::to_string(r)] = std::move(arr);
  }
  j["last_r"] = std::move(last);
  const auto cap = measure_capacity_passkey(g);
  j["capacity"] = cap ? ordered_json(*cap) : ordered_json(nullptr);
  return j.dump(2);
}

// ---------------------------------------------------------------------------

std::string to_string(CapacityLaw law) {
  return law == CapacityLaw::kLinear ? "linear" : "exponential";
}

CapacityLaw parse_capacity_law(const std::string& s) {
  if (s == "linear") return CapacityLaw::kLinear;
  if (s == "exponential" || s == "exp") return CapacityLaw::kExponential;
  throw UsageError("unknown capacity law '" + s + "' (expected linear|exponential)");
}

double CapacityFit::predict(double s) const {
  const double v = intercept + slope * s;
  return law == CapacityLaw::kLinear ? v : std::exp(v);
}

CapacityFit fit_capacity_law(const std::vector<CapacityPoint>& points, CapacityLaw law,
                             std::string state_unit, std::string length_unit) {
  if (points.size() < 2) throw UsageError("capacity fit needs at least two points");
  const bool all_equal = std::all_of(points.begin(), points.end(), [&](const CapacityPoint& p) {
    return p.state_size == points.front().state_size;
  });
  if (all_equal) throw UsageError("capacity fit is degenerate: every state size is equal");
  const auto n = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd a(n, 2);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& p = points[static_cast<std::size_t>(i)];
    if (law == CapacityLaw::kExponential && !(p.length > 0.0)) {
      throw UsageError("exponential capacity fit needs every length > 0");
    }
    a(i, 0) = p.state_size;
    a(i, 1) = 1.0;
    y(i) = law == CapacityLaw::kLinear ? p.length : std::log(p.length);
  }
  const Eigen::Vector2d beta = a.householderQr().solve(y);
  CapacityFit f;
  f.law = law;
  f.slope = beta(0);
  f.intercept = beta(1);
  const Eigen::VectorXd res = y - a * beta;
  f.residuals.assign(res.data(), res.data() + res.size());
  f.rss = res.squaredNorm();
  f.points = points;
  f.state_unit = std::move(state_unit);
  f.length_unit = std::move(length_unit);
  return f;
}

std::vector<CapacityPoint> read_capacity_points(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("capacity points: empty input");
  const auto header = split_csv(line);
  auto column = [&](std::initializer_list<const char*> names) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i) {
      for (const char* n : names) {
        if (header[i] == n) return i;
      }
    }
    throw DataError("capacity points: header needs a state_size and a length column");
  };
  const std::size_t cs = column({"state_size", "S"});
  const std::size_t ct = column({"length", "T", "train_len"});
  std::vector<CapacityPoint> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv(line);
    if (cells.size() <= std::max(cs, ct)) {
      throw DataError("capacity points: line " + std::to_string(lineno) + " has too few columns");
    }
    try {
      std::size_t used_s = 0, used_t = 0;
      const double s = std::stod(cells[cs], &used_s);
      const double t = std::stod(cells[ct], &used_t);
      if (used_s != cells[cs].size() || used_t != cells[ct].size()) throw std::invalid_argument("");
      out.push_back({s, t});
    } catch (const std::exception&) {
      throw DataError("capacity points: line " + std::to_string(lineno) + " is not numeric");
    }
  }
  return out;
}

std::string fit_to_json(const CapacityFit& f) {
  ordered_json j;
  j["schema_version"] = 1;
  j["law"] = to_string(f.law);
  j["slope"] = f.slope;
  j["intercept"] = f.intercept;
  j["form"] = f.law == CapacityLaw::kLinear ? "T = slope * S + intercept"
                                            : "T = exp(intercept + slope * S)";
  j["residuals"] = f.residuals;
  j["rss"] = f.rss;
  ordered_json pts = ordered_json::array();
  for (const auto& p : f.points) pts.push_back({{"state_size", p.state_size}, {"length", p.length}});
  j["points"] = std::move(pts);
  j["state_unit"] = f.state_unit;
  j["length_unit"] = f.length_unit;
  return j.dump(2);
}

}  // namespace sclab
