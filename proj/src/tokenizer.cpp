#include "rlm/tokenizer.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <queue>
#include <tuple>
#include <unordered_map>
#include <sstream>

#include "rlm/common.hpp"

namespace rlm {
namespace {

constexpr std::string_view kMagic = "rlm-vocab v1";
constexpr const char* kSpecialNames[] = {"<pad>", "<eos>", "<unk>"};

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

std::string escape_piece(std::string_view s) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c <= 0x20 || c >= 0x7f) {
      out += "\\x";
      out += kHex[c >> 4];
      out += kHex[c & 15];
    } else {
      out += static_cast<char>(c);
    }
  }
  return out;
}

std::string unescape_piece(std::string_view s, std::size_t line) {
  auto hex = [&](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw ParseError("vocabulary line " + std::to_string(line) + ": bad hex escape", line);
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 1 < s.size() && s[i + 1] == '\\') {
      out += '\\';
      ++i;
    } else if (i + 3 < s.size() && s[i + 1] == 'x') {
      out += static_cast<char>(hex(s[i + 2]) * 16 + hex(s[i + 3]));
      i += 3;
    } else {
      throw ParseError("vocabulary line " + std::to_string(line) + ": bad escape", line);
    }
  }
  return out;
}

// Merges every non-overlapping occurrence of (a, b), left to right.
bool apply_merge(std::vector<TokenId>& seq, TokenId a, TokenId b, TokenId merged) {
  bool changed = false;
  std::size_t w = 0;
  for (std::size_t r = 0; r < seq.size(); ++r) {
    if (r + 1 < seq.size() && seq[r] == a && seq[r + 1] == b) {
      seq[w++] = merged;
      ++r;
      changed = true;
    } else {
      seq[w++] = seq[r];
    }
  }
  seq.resize(w);
  return changed;
}

}  // namespace

Vocabulary Vocabulary::byte_level(NumericFormat fmt) {
  Vocabulary v;
  v.pieces_.reserve(kBaseSize);
  for (std::size_t i = 0; i < kSpecialCount; ++i) v.pieces_.emplace_back();
  for (int b = 0; b < 256; ++b) v.pieces_.emplace_back(1, static_cast<char>(b));
  v.numeric_ = fmt;
  v.numeric_.base = static_cast<TokenId>(v.pieces_.size());
  v.numeric_.validate();
  return v;
}

const std::string& Vocabulary::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size())
    throw ParseError("unknown token id " + std::to_string(id), 0);
  return pieces_[static_cast<std::size_t>(id)];
}

void Vocabulary::set_numeric_digits(int mantissa_digits, int exponent_digits) {
  NumericFormat f{mantissa_digits, exponent_digits, static_cast<TokenId>(pieces_.size())};
  f.validate();
  numeric_ = f;
}

TokenId Vocabulary::merged(TokenId left, TokenId right) const {
  auto it = merge_index_.find(pair_key(left, right));
  return it == merge_index_.end() ? -1 : it->second;
}

void Vocabulary::add_merge(TokenId left, TokenId right) {
  const auto id = static_cast<TokenId>(pieces_.size());
  pieces_.push_back(pieces_[static_cast<std::size_t>(left)] +
                    pieces_[static_cast<std::size_t>(right)]);
  merges_.push_back({left, right});
  merge_index_.emplace(pair_key(left, right), id);
  numeric_.base = static_cast<TokenId>(pieces_.size());
}

std::string Vocabulary::serialize() const {
  std::ostringstream os;
  os << kMagic << '\n';
  os << "size " << pieces_.size() << '\n';
  os << "specials pad=" << kPadId << " eos=" << kEosId << " unk=" << kUnkId << '\n';
  os << "numeric mantissa_digits=" << numeric_.mantissa_digits
     << " exponent_digits=" << numeric_.exponent_digits << " base=" << numeric_.base << '\n';
  os << "pieces\n";
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (i < kSpecialCount)
      os << kSpecialNames[i] << '\n';
    else
      os << escape_piece(pieces_[i]) << '\n';
  }
  os << "merges " << merges_.size() << '\n';
  for (const auto& m : merges_) os << m.left << ' ' << m.right << '\n';
  return os.str();
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string> lines;
  {
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) {
        if (start < text.size()) lines.emplace_back(text.substr(start));
        break;
      }
      lines.emplace_back(text.substr(start, end - start));
      start = end + 1;
    }
  }
  auto fail = [](std::size_t line, const std::string& what) -> ParseError {
    return ParseError("vocabulary line " + std::to_string(line + 1) + ": " + what, line + 1);
  };
  if (lines.size() < 5 || lines[0] != kMagic) throw fail(0, "missing 'rlm-vocab v1' header");
  std::size_t size = 0;
  if (std::sscanf(lines[1].c_str(), "size %zu", &size) != 1) throw fail(1, "expected size");
  int pad = -1, eos = -1, unk = -1;
  if (std::sscanf(lines[2].c_str(), "specials pad=%d eos=%d unk=%d", &pad, &eos, &unk) != 3 ||
      pad != kPadId || eos != kEosId || unk != kUnkId)
    throw fail(2, "unsupported special ids");
  int md = 0, ed = 0, base = 0;
  if (std::sscanf(lines[3].c_str(), "numeric mantissa_digits=%d exponent_digits=%d base=%d", &md,
                  &ed, &base) != 3)
    throw fail(3, "expected numeric format");
  if (lines[4] != "pieces") throw fail(4, "expected 'pieces'");
  if (size < kBaseSize || lines.size() < 5 + size + 1) throw fail(1, "size/piece count mismatch");

  Vocabulary v = byte_level();
  for (std::size_t i = 0; i < kBaseSize; ++i) {
    if (i < kSpecialCount) {
      if (lines[5 + i] != kSpecialNames[i]) throw fail(5 + i, "unexpected special piece");
    } else if (unescape_piece(lines[5 + i], 6 + i) != v.pieces_[i]) {
      throw fail(5 + i, "byte piece mismatch");
    }
  }
  const std::size_t merge_header = 5 + size;
  std::size_t merge_count = 0;
  if (std::sscanf(lines[merge_header].c_str(), "merges %zu", &merge_count) != 1 ||
      merge_count != size - kBaseSize)
    throw fail(merge_header, "merge count does not match size");
  if (lines.size() < merge_header + 1 + merge_count) throw fail(merge_header, "truncated merges");
  for (std::size_t m = 0; m < merge_count; ++m) {
    const std::size_t ln = merge_header + 1 + m;
    int a = -1, b = -1;
    if (std::sscanf(lines[ln].c_str(), "%d %d", &a, &b) != 2) throw fail(ln, "expected merge pair");
    const auto next = static_cast<TokenId>(v.pieces_.size());
    if (a < static_cast<TokenId>(kSpecialCount) || b < static_cast<TokenId>(kSpecialCount) ||
        a >= next || b >= next)
      throw fail(ln, "merge refers to an unknown or special id");
    v.add_merge(a, b);
    if (unescape_piece(lines[5 + v.pieces_.size() - 1], 6 + v.pieces_.size() - 1) !=
        v.pieces_.back())
      throw fail(5 + v.pieces_.size() - 1, "piece does not match its merge");
  }
  if (base != static_cast<int>(size)) throw fail(3, "numeric base must equal vocabulary size");
  v.set_numeric_digits(md, ed);
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write vocabulary to " + path.string());
  out << serialize();
  if (!out) throw Error("failed writing vocabulary to " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read vocabulary " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(serialize()); }

Vocabulary train_vocab(std::span<const std::string> corpus, std::size_t target_size,
                       NumericFormat fmt) {
  if (corpus.empty()) throw ConfigError("train_vocab: corpus is empty");
  if (target_size <= Vocabulary::kBaseSize)
    throw ConfigError("train_vocab: target size " + std::to_string(target_size) +
                      " must exceed " + std::to_string(Vocabulary::kBaseSize));
  Vocabulary vocab = Vocabulary::byte_level(fmt);

  std::map<std::string, std::int64_t> doc_counts;
  for (const auto& doc : corpus) ++doc_counts[doc];

  struct Word {
    std::vector<TokenId> ids;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(doc_counts.size());
  for (const auto& [text, count] : doc_counts) {
    Word w{{}, count};
    w.ids.reserve(text.size());
    for (unsigned char c : text) w.ids.push_back(Vocabulary::kByteBase + c);
    if (w.ids.size() >= 2) words.push_back(std::move(w));
  }

  // Pair counts are kept incrementally; `where` lists words that may hold a pair
  // (entries can be stale and are rechecked).
  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;
  auto note = [&](std::uint64_t key, std::uint32_t w) {
    auto& list = where[key];
    if (list.empty() || list.back() != w) list.push_back(w);
  };
  auto add_pairs = [&](std::uint32_t w, std::int64_t sign, TokenId indexed) {
    const auto& ids = words[w].ids;
    // Overlapping runs like "aaa" count every adjacent position.
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto key = pair_key(ids[i], ids[i + 1]);
      auto it = pair_counts.try_emplace(key, 0).first;
      it->second += sign * words[w].count;
      if (it->second == 0) pair_counts.erase(it);
      if (sign > 0 && (indexed < 0 || ids[i] == indexed || ids[i + 1] == indexed)) note(key, w);
    }
  };
  for (std::uint32_t w = 0; w < words.size(); ++w) add_pairs(w, +1, -1);

  std::vector<std::uint64_t> seen(words.size(), 0);
  std::uint64_t stamp = 0;
  while (vocab.size() < target_size) {
    std::int64_t best_count = 1;
    TokenId best_a = -1, best_b = -1;
    for (const auto& [key, count] : pair_counts) {
      const auto a = static_cast<TokenId>(key >> 32);
      const auto b = static_cast<TokenId>(key & 0xffffffffu);
      bool better = count > best_count;
      if (!better && count == best_count && best_a >= 0) {
        const auto& pa = vocab.piece(a);
        const auto& pb = vocab.piece(b);
        const auto& qa = vocab.piece(best_a);
        const auto& qb = vocab.piece(best_b);
        better = pa < qa || (pa == qa && pb < qb);
      }
      if (better) {
        best_count = count;
        best_a = a;
        best_b = b;
      }
    }
    if (best_a < 0) break;
    vocab.add_merge(best_a, best_b);
    const auto new_id = static_cast<TokenId>(vocab.size() - 1);
    const auto key = pair_key(best_a, best_b);
    auto holders = std::move(where[key]);
    where.erase(key);
    ++stamp;
    for (std::uint32_t w : holders) {
      if (seen[w] == stamp) continue;
      seen[w] = stamp;
      auto& ids = words[w].ids;
      bool present = false;
      for (std::size_t i = 0; i + 1 < ids.size() && !present; ++i)
        present = ids[i] == best_a && ids[i + 1] == best_b;
      if (!present) continue;
      add_pairs(w, -1, -1);
      apply_merge(ids, best_a, best_b, new_id);
      add_pairs(w, +1, new_id);
    }
  }
  vocab.numeric_.base = static_cast<TokenId>(vocab.size());
  return vocab;
}

std::vector<TokenId> encode_text(std::string_view text, const Vocabulary& vocab,
                                 std::size_t max_len) {
  const std::size_t n = text.size();
  std::vector<TokenId> id(n);
  std::vector<std::ptrdiff_t> prev(n), next(n);
  for (std::size_t i = 0; i < n; ++i) {
    id[i] = Vocabulary::kByteBase + static_cast<unsigned char>(text[i]);
    prev[i] = static_cast<std::ptrdiff_t>(i) - 1;
    next[i] = i + 1 < n ? static_cast<std::ptrdiff_t>(i + 1) : -1;
  }
  // Min-heap on (merge id, position): merge ids grow with rank, and equal ranks go left
  // to right, which reproduces applying each merge in training order.
  using Entry = std::tuple<TokenId, std::ptrdiff_t, TokenId, TokenId>;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  auto push = [&](std::ptrdiff_t l) {
    const std::ptrdiff_t r = next[static_cast<std::size_t>(l)];
    if (r < 0) return;
    const TokenId a = id[static_cast<std::size_t>(l)];
    const TokenId b = id[static_cast<std::size_t>(r)];
    const TokenId m = vocab.merged(a, b);
    if (m >= 0) heap.emplace(m, l, a, b);
  };
  for (std::size_t i = 0; i + 1 < n; ++i) push(static_cast<std::ptrdiff_t>(i));
  while (!heap.empty()) {
    const auto [m, l, a, b] = heap.top();
    heap.pop();
    const auto lu = static_cast<std::size_t>(l);
    if (id[lu] != a) continue;
    const std::ptrdiff_t r = next[lu];
    if (r < 0 || id[static_cast<std::size_t>(r)] != b) continue;
    const auto ru = static_cast<std::size_t>(r);
    id[lu] = m;
    id[ru] = -1;
    next[lu] = next[ru];
    if (next[ru] >= 0) prev[static_cast<std::size_t>(next[ru])] = l;
    if (prev[lu] >= 0) push(prev[lu]);
    push(l);
  }
  std::vector<TokenId> out;
  for (std::ptrdiff_t i = n ? 0 : -1; i >= 0 && out.size() < max_len; i = next[static_cast<std::size_t>(i)])
    out.push_back(id[static_cast<std::size_t>(i)]);
  return out;
}

std::string decode_text(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) out += vocab.piece(id);
  return out;
}

}  // namespace rlm
