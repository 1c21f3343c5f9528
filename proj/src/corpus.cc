// Copyright 2026 The keytune Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "keytune/corpus.h"

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "keytune/error.h"
#include "keytune/resources.h"

namespace keytune {
namespace {

constexpr std::array<std::string_view, 4> kTagLiterals = {
    kThinkingOpen, kThinkingClose, kAnswerOpen, kAnswerClose};

constexpr std::string_view kUserPrefix = "\nUser: ";
constexpr std::string_view kAssistantSuffix = "\nAssistant:";

std::optional<std::string_view> FindTagLiteral(std::string_view text) {
  for (std::string_view tag : kTagLiterals) {
    if (text.find(tag) != std::string_view::npos) return tag;
  }
  return std::nullopt;
}

void AppendIds(TokenIds& out, const TokenIds& ids) {
  out.insert(out.end(), ids.begin(), ids.end());
}

std::int64_t Pow10(int n) {
  std::int64_t v = 1;
  for (int i = 0; i < n; ++i) v *= 10;
  return v;
}

struct OperandRange {
  std::int64_t lo;
  std::int64_t hi;
  std::uint64_t count() const { return static_cast<std::uint64_t>(hi - lo + 1); }
};

OperandRange RangeFor(const SyntheticTaskSpec& spec) {
  return {spec.min_digits == 1 ? 0 : Pow10(spec.min_digits - 1),
          Pow10(spec.max_digits) - 1};
}

void ValidateSpec(const SyntheticTaskSpec& spec) {
  if (spec.min_digits < 1 || spec.max_digits < spec.min_digits ||
      spec.max_digits > 9) {
    throw DataError("digit range must satisfy 1 <= min_digits <= max_digits <= 9");
  }
  if (spec.train_count < 1 || spec.eval_count < 1) {
    throw DataError("train and eval counts must be >= 1");
  }
}

std::vector<int> DigitsLowFirst(std::int64_t v, std::size_t width) {
  std::vector<int> d(width, 0);
  for (std::size_t i = 0; i < width && v > 0; ++i, v /= 10) d[i] = static_cast<int>(v % 10);
  return d;
}

std::size_t DigitCount(std::int64_t v) {
  std::size_t n = 1;
  while (v >= 10) v /= 10, ++n;
  return n;
}

// Column-wise addition from the units column, e.g. for 47 + 85:
// "7+5=12 write 2 carry 1.\n4+8+1=13 write 3 carry 1.\nCarry 1.\n"
std::string AdditionSteps(std::int64_t a, std::int64_t b) {
  const std::size_t width = std::max(DigitCount(a), DigitCount(b));
  const auto da = DigitsLowFirst(a, width), db = DigitsLowFirst(b, width);
  std::ostringstream out;
  int carry = 0;
  for (std::size_t i = 0; i < width; ++i) {
    const int s = da[i] + db[i] + carry;
    out << da[i] << '+' << db[i];
    if (carry) out << "+1";
    out << '=' << s << " write " << s % 10;
    carry = s >= 10 ? 1 : 0;
    if (carry) out << " carry 1";
    out << ".\n";
  }
  if (carry) out << "Carry 1.\n";
  return out.str();
}

// Column-wise subtraction (a >= b) with explicit borrows, e.g. 52 - 17:
// "2-7 borrow 12-7=5 write 5.\n5-1-1=3 write 3.\n"
std::string SubtractionSteps(std::int64_t a, std::int64_t b) {
  const std::size_t width = DigitCount(a);
  const auto da = DigitsLowFirst(a, width), db = DigitsLowFirst(b, width);
  std::ostringstream out;
  int borrow = 0;
  for (std::size_t i = 0; i < width; ++i) {
    const int top = da[i] - borrow;
    out << da[i];
    if (borrow) out << "-1";
    out << '-' << db[i];
    if (top < db[i]) {
      out << " borrow " << 10 + top << '-' << db[i] << '=' << 10 + top - db[i]
          << " write " << 10 + top - db[i] << ".\n";
      borrow = 1;
    } else {
      out << '=' << top - db[i] << " write " << top - db[i] << ".\n";
      borrow = 0;
    }
  }
  return out.str();
}

constexpr std::array<std::string_view, 6> kColors = {"red",   "blue",  "green",
                                                     "yellow", "white", "black"};

RawExample MultipleChoiceExample(std::mt19937_64& rng) {
  std::array<char, 26> letters;
  for (int i = 0; i < 26; ++i) letters[i] = static_cast<char>('A' + i);
  std::array<int, 6> colors = {0, 1, 2, 3, 4, 5};
  std::shuffle(letters.begin(), letters.end(), rng);
  std::shuffle(colors.begin(), colors.end(), rng);
  const int query = std::uniform_int_distribution<int>(0, 2)(rng);
  const int distractor = 3 + std::uniform_int_distribution<int>(0, 2)(rng);
  std::array<int, 4> options = {colors[0], colors[1], colors[2], colors[distractor]};
  std::shuffle(options.begin(), options.end(), rng);

  std::ostringstream q;
  q << "Facts:";
  for (int i = 0; i < 3; ++i) q << ' ' << letters[i] << " is " << kColors[colors[i]] << '.';
  q << " What color is " << letters[query] << "? Options:";
  char correct = '?';
  for (int i = 0; i < 4; ++i) {
    const char label = static_cast<char>('A' + i);
    q << " (" << label << ") " << kColors[options[i]];
    if (options[i] == colors[query]) correct = label;
  }
  RawExample ex;
  ex.prompt = FormatPrompt(q.str());
  ex.thinking = "The facts say " + std::string(1, letters[query]) + " is " +
                std::string(kColors[colors[query]]) + ".\nOption " + correct +
                " is " + std::string(kColors[colors[query]]) + ".\n";
  ex.answer = std::string(1, correct);
  return ex;
}

RawExample ArithmeticExample(const SyntheticTaskSpec& spec, std::mt19937_64& rng) {
  const OperandRange r = RangeFor(spec);
  std::uniform_int_distribution<std::int64_t> pick(r.lo, r.hi);
  std::int64_t a = pick(rng), b = pick(rng);
  RawExample ex;
  if (spec.kind == TaskKind::kAddition) {
    ex.prompt = FormatPrompt("What is " + std::to_string(a) + " + " + std::to_string(b) + "?");
    ex.thinking = AdditionSteps(a, b);
    ex.answer = std::to_string(a + b);
  } else {
    if (a < b) std::swap(a, b);
    ex.prompt = FormatPrompt("What is " + std::to_string(a) + " - " + std::to_string(b) + "?");
    ex.thinking = SubtractionSteps(a, b);
    ex.answer = std::to_string(a - b);
  }
  return ex;
}

}  // namespace

void ValidateRawExample(const RawExample& example) {
  if (example.answer.empty()) throw DataError("answer must be non-empty");
  if (auto tag = FindTagLiteral(example.thinking)) {
    throw DataError("thinking contains reserved tag literal " + std::string(*tag));
  }
  if (auto tag = FindTagLiteral(example.answer)) {
    throw DataError("answer contains reserved tag literal " + std::string(*tag));
  }
}

Vocabulary::Vocabulary() {
  id_to_token_ = {"<pad>",
                  "<bos>",
                  "<eos>",
                  std::string(kThinkingOpen),
                  std::string(kThinkingClose),
                  std::string(kAnswerOpen),
                  std::string(kAnswerClose)};
  char_to_id_.fill(-1);
  auto add_char = [this](char c) {
    char_to_id_[static_cast<unsigned char>(c)] = static_cast<TokenId>(id_to_token_.size());
    id_to_token_.emplace_back(1, c);
  };
  add_char('\n');
  for (char c = 0x20; c < 0x7f; ++c) add_char(c);
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i));
  }
}

const Vocabulary& Vocabulary::Default() {
  static const Vocabulary vocab;
  return vocab;
}

TokenIds Vocabulary::Tokenize(std::string_view text) const {
  TokenIds ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    const TokenId id = char_to_id_[static_cast<unsigned char>(text[i])];
    if (id < 0) {
      throw DataError("unknown symbol at byte offset " + std::to_string(i) +
                      " (0x" + [](unsigned char c) {
                        static constexpr char kHex[] = "0123456789abcdef";
                        return std::string{kHex[c >> 4], kHex[c & 0xf]};
                      }(static_cast<unsigned char>(text[i])) + ")");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string Vocabulary::Detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || id >= size()) throw DataError("token id out of range: " + std::to_string(id));
    if (id == kPad || id == kBos || id == kEos) continue;
    out += id_to_token_[id];
  }
  return out;
}

const std::string& Vocabulary::TokenName(TokenId id) const {
  if (id < 0 || id >= size()) throw DataError("token id out of range: " + std::to_string(id));
  return id_to_token_[id];
}

std::optional<TokenId> Vocabulary::Lookup(std::string_view token_name) const {
  auto it = token_to_id_.find(std::string(token_name));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

TaggedExample Reconstruct(const RawExample& example, const Vocabulary& vocab) {
  ValidateRawExample(example);
  const TokenIds prompt = vocab.Tokenize(example.prompt);
  const TokenIds thinking = vocab.Tokenize(example.thinking);
  const TokenIds answer = vocab.Tokenize(example.answer);

  TaggedExample out;
  out.prompt_ids.reserve(prompt.size() + 1);
  out.prompt_ids.push_back(Vocabulary::kBos);
  AppendIds(out.prompt_ids, prompt);

  out.target_ids.reserve(thinking.size() + answer.size() + 5);
  out.target_ids.push_back(Vocabulary::kThinkingOpenId);
  AppendIds(out.target_ids, thinking);
  out.boundary_t = out.target_ids.size();
  out.target_ids.push_back(Vocabulary::kThinkingCloseId);
  out.target_ids.push_back(Vocabulary::kAnswerOpenId);
  AppendIds(out.target_ids, answer);
  out.target_ids.push_back(Vocabulary::kAnswerCloseId);
  out.target_ids.push_back(Vocabulary::kEos);

  out.untagged_target_ids = thinking;
  AppendIds(out.untagged_target_ids, answer);
  out.untagged_target_ids.push_back(Vocabulary::kEos);
  return out;
}

std::string_view TaskKindName(TaskKind kind) {
  switch (kind) {
    case TaskKind::kAddition: return "addition";
    case TaskKind::kSubtraction: return "subtraction";
    case TaskKind::kMultipleChoice: return "multiple-choice";
  }
  return "unknown";
}

TaskKind ParseTaskKind(std::string_view name) {
  if (name == "addition") return TaskKind::kAddition;
  if (name == "subtraction") return TaskKind::kSubtraction;
  if (name == "multiple-choice") return TaskKind::kMultipleChoice;
  throw UsageError("unknown task kind: " + std::string(name));
}

std::uint64_t CorpusCapacity(const SyntheticTaskSpec& spec) {
  ValidateSpec(spec);
  switch (spec.kind) {
    case TaskKind::kAddition: {
      const std::uint64_t n = RangeFor(spec).count();
      return n * n;
    }
    case TaskKind::kSubtraction: {
      const std::uint64_t n = RangeFor(spec).count();
      return n * (n + 1) / 2;
    }
    case TaskKind::kMultipleChoice:
      // entities x colors x query x distractor x option order
      return std::uint64_t{26 * 25 * 24} * (6 * 5 * 4) * 3 * 3 * 24;
  }
  return 0;
}

SplitCorpus GenerateCorpus(const SyntheticTaskSpec& spec) {
  const std::uint64_t capacity = CorpusCapacity(spec);
  const std::uint64_t wanted = spec.train_count + spec.eval_count;
  if (wanted > capacity) {
    throw DataError("capacity error: requested " + std::to_string(wanted) +
                    " distinct examples but the " + std::string(TaskKindName(spec.kind)) +
                    " task over this digit range has only " + std::to_string(capacity));
  }
  std::mt19937_64 rng(spec.seed);
  std::unordered_set<std::string> seen;
  std::vector<RawExample> all;
  all.reserve(wanted);
  while (all.size() < wanted) {
    RawExample ex = spec.kind == TaskKind::kMultipleChoice ? MultipleChoiceExample(rng)
                                                           : ArithmeticExample(spec, rng);
    if (seen.insert(ex.prompt).second) all.push_back(std::move(ex));
  }
  SplitCorpus out;
  out.train.assign(std::make_move_iterator(all.begin()),
                   std::make_move_iterator(all.begin() + spec.train_count));
  out.eval.assign(std::make_move_iterator(all.begin() + spec.train_count),
                  std::make_move_iterator(all.end()));
  return out;
}

std::string FormatPrompt(std::string_view question) {
  std::string p(resources::SystemInstructionV1());
  p += kUserPrefix;
  p += question;
  p += kAssistantSuffix;
  return p;
}

std::string QuestionFromPrompt(std::string_view prompt) {
  const std::string_view head = resources::SystemInstructionV1();
  if (prompt.size() < head.size() + kUserPrefix.size() + kAssistantSuffix.size() ||
      prompt.substr(0, head.size()) != head ||
      prompt.substr(head.size(), kUserPrefix.size()) != kUserPrefix ||
      !prompt.ends_with(kAssistantSuffix)) {
    return std::string(prompt);
  }
  const std::size_t begin = head.size() + kUserPrefix.size();
  return std::string(prompt.substr(begin, prompt.size() - begin - kAssistantSuffix.size()));
}

std::vector<RawExample> LoadDataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read dataset " + path.string());
  std::vector<RawExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!record.is_object()) throw DataError(where + "record is not a JSON object");
    RawExample ex;
    for (auto [name, field] : {std::pair{"prompt", &ex.prompt},
                               std::pair{"thinking", &ex.thinking},
                               std::pair{"answer", &ex.answer}}) {
      auto it = record.find(name);
      if (it == record.end()) {
        throw DataError(where + "missing field \"" + name + "\" on line " +
                        std::to_string(line_no));
      }
      if (!it->is_string()) throw DataError(where + "field \"" + name + "\" is not a string");
      *field = it->get<std::string>();
    }
    try {
      ValidateRawExample(ex);
    } catch (const Error& e) {
      throw DataError(where + e.what());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void SaveDataset(const std::filesystem::path& path, std::span<const RawExample> examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const RawExample& ex : examples) {
    nlohmann::ordered_json record;
    record["prompt"] = ex.prompt;
    record["thinking"] = ex.thinking;
    record["answer"] = ex.answer;
    out << record.dump() << '\n';
  }
  if (!out) throw DataError("failed writing dataset " + path.string());
}

}  // namespace keytune
