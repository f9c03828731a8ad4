#include "rlm/synthetic.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <memory>
#include <optional>

#include "rlm/common.hpp"

namespace rlm {
namespace {

// ---------------------------------------------------------------------------
// Parsing

struct Node {
  char op = 0;  // 0 for leaves
  std::string name;
  std::uint64_t literal = 0;
  std::unique_ptr<Node> lhs, rhs;
};

struct Statement {
  std::optional<std::string> target;
  std::unique_ptr<Node> expr;
};

class Parser {
 public:
  explicit Parser(std::string_view src) : src_(src) {}

  std::vector<Statement> program() {
    std::vector<Statement> out;
    while (true) {
      Statement st;
      skip_ws();
      const std::size_t save = pos_;
      if (auto name = ident()) {
        skip_ws();
        if (peek() == '=') {
          ++pos_;
          st.target = std::move(*name);
        } else {
          pos_ = save;
        }
      }
      st.expr = expr();
      out.push_back(std::move(st));
      skip_ws();
      if (peek() == ';') {
        ++pos_;
        continue;
      }
      if (pos_ != src_.size()) fail("unexpected character");
      break;
    }
    if (out.back().target) fail("program must end with an expression");
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("toy program offset " + std::to_string(pos_) + ": " + what, pos_);
  }
  char peek() const { return pos_ < src_.size() ? src_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }
  std::optional<std::string> ident() {
    if (!std::isalpha(static_cast<unsigned char>(peek()))) return std::nullopt;
    const std::size_t start = pos_;
    while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_') ++pos_;
    return std::string(src_.substr(start, pos_ - start));
  }

  std::unique_ptr<Node> expr() {
    auto lhs = term();
    while (true) {
      skip_ws();
      const char c = peek();
      if (c != '+' && c != '-') return lhs;
      ++pos_;
      auto n = std::make_unique<Node>();
      n->op = c;
      n->lhs = std::move(lhs);
      n->rhs = term();
      lhs = std::move(n);
    }
  }
  std::unique_ptr<Node> term() {
    auto lhs = atom();
    while (true) {
      skip_ws();
      if (peek() != '*') return lhs;
      ++pos_;
      auto n = std::make_unique<Node>();
      n->op = '*';
      n->lhs = std::move(lhs);
      n->rhs = atom();
      lhs = std::move(n);
    }
  }
  std::unique_ptr<Node> atom() {
    skip_ws();
    const char c = peek();
    if (c == '(') {
      ++pos_;
      auto inner = expr();
      skip_ws();
      if (peek() != ')') fail("expected ')'");
      ++pos_;
      return inner;
    }
    auto n = std::make_unique<Node>();
    if (std::isdigit(static_cast<unsigned char>(c))) {
      while (std::isdigit(static_cast<unsigned char>(peek()))) {
        n->literal = n->literal * 10 + static_cast<std::uint64_t>(peek() - '0');
        ++pos_;
      }
      return n;
    }
    if (auto name = ident()) {
      n->name = std::move(*name);
      return n;
    }
    fail(c == '\0' ? "unexpected end of program" : "expected operand");
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

int count_ops(const Node& n) {
  return n.op == 0 ? 0 : 1 + count_ops(*n.lhs) + count_ops(*n.rhs);
}

// ---------------------------------------------------------------------------
// Reference interpreter

struct Machine {
  std::map<std::string, std::uint64_t> env;
  std::uint64_t input_seed = 0;
  std::int64_t depth = 0;
  ExecMetrics m;

  std::uint64_t input(const std::string& name) {
    return derive_seed(input_seed, static_cast<unsigned char>(name[0])) % 100;
  }
  void push() {
    ++depth;
    m.peak_stack = std::max(m.peak_stack, depth);
  }
  std::uint64_t eval(const Node& n) {
    if (n.op == 0) {
      ++m.step_count;
      push();
      if (!n.name.empty()) {
        if (auto it = env.find(n.name); it != env.end()) return it->second;
        if (n.name.size() == 1) return input(n.name);
        throw ConfigError("undefined variable '" + n.name + "'");
      }
      return n.literal;
    }
    const std::uint64_t a = eval(*n.lhs);
    const std::uint64_t b = eval(*n.rhs);
    ++m.step_count;
    depth -= 2;
    push();
    switch (n.op) {
      case '+':
        return a + b;
      case '-':
        return a - b;
      default:
        return a * b;
    }
  }
};

// ---------------------------------------------------------------------------
// Generation

int precedence(char op) { return op == '*' ? 2 : 1; }

struct Gen {
  std::mt19937_64& rng;
  std::vector<std::string> names;

  std::uint64_t below(std::uint64_t n) { return rng() % n; }

  // Returns source text and the precedence of its top operator (3 for atoms).
  std::pair<std::string, int> expr(int ops) {
    if (ops == 0) {
      if (below(10) < 7) return {names[below(names.size())], 3};
      return {std::to_string(below(100)), 3};
    }
    const int left_ops = static_cast<int>(below(static_cast<std::uint64_t>(ops)));
    static constexpr char kOps[] = {'+', '-', '*'};
    const char op = kOps[below(3)];
    auto [l, lp] = expr(left_ops);
    auto [r, rp] = expr(ops - 1 - left_ops);
    const int p = precedence(op);
    if (lp < p) l = "(" + l + ")";
    // Right operands of equal precedence keep their grouping explicit.
    if (rp <= p) r = "(" + r + ")";
    return {l + " " + op + " " + r, p};
  }
};

}  // namespace

ToyProgram gen_program(std::mt19937_64& rng, const SizeParams& size) {
  if (size.min_ops < 1 || size.max_ops < size.min_ops || size.num_vars < 1 || size.num_vars > 26)
    throw ConfigError("gen_program: need 1 <= min_ops <= max_ops and 1 <= num_vars <= 26");
  static constexpr std::string_view kInputs = "xyzwuvabcdefghijklmnopqrst";
  Gen g{rng, {}};
  for (int v = 0; v < size.num_vars; ++v) g.names.emplace_back(1, kInputs[static_cast<std::size_t>(v)]);

  const auto span = static_cast<std::uint64_t>(size.max_ops - size.min_ops + 1);
  const int ops = size.min_ops + static_cast<int>(g.below(span));
  const int statements = 1 + static_cast<int>(g.below(static_cast<std::uint64_t>(std::min(ops, 4))));

  // Random composition of `ops` into `statements` positive parts.
  std::vector<int> cuts;
  while (static_cast<int>(cuts.size()) < statements - 1) {
    const int c = 1 + static_cast<int>(g.below(static_cast<std::uint64_t>(ops - 1)));
    if (std::find(cuts.begin(), cuts.end(), c) == cuts.end()) cuts.push_back(c);
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.push_back(ops);

  ToyProgram p;
  int prev = 0;
  for (int s = 0; s < statements; ++s) {
    const int part = cuts[static_cast<std::size_t>(s)] - prev;
    prev = cuts[static_cast<std::size_t>(s)];
    auto text = g.expr(part).first;
    if (s + 1 < statements) {
      std::string target = "t" + std::to_string(s);
      p.source += target + " = " + text + "; ";
      g.names.push_back(std::move(target));
    } else {
      p.source += text;
    }
  }
  return p;
}

ToyProgram gen_program(std::uint64_t seed, const SizeParams& size) {
  std::mt19937_64 rng(seed);
  ToyProgram p = gen_program(rng, size);
  p.seed = seed;
  return p;
}

int static_op_count(std::string_view source) {
  int total = 0;
  for (const auto& st : Parser(source).program()) total += count_ops(*st.expr);
  return total;
}

ExecMetrics exec_metrics(std::string_view source, std::uint64_t env_seed) {
  Machine m;
  m.input_seed = env_seed;
  for (const auto& st : Parser(source).program()) {
    const std::uint64_t v = m.eval(*st.expr);
    --m.depth;
    if (st.target)
      m.env[*st.target] = v;
    else
      m.m.value = v;
  }
  return m.m;
}

MetricSet parse_metric_set(std::string_view name) {
  if (name == "cheap") return MetricSet::cheap;
  if (name == "exec") return MetricSet::exec;
  if (name == "both") return MetricSet::both;
  throw ConfigError("metric set must be cheap, exec or both (got '" + std::string(name) + "')");
}

std::vector<RegressionExample> make_synthetic_examples(std::size_t n, std::uint64_t seed,
                                                       MetricSet metrics, const SizeParams& size,
                                                       std::string task_id) {
  if (task_id.empty()) {
    task_id = metrics == MetricSet::cheap ? "synth-cheap"
              : metrics == MetricSet::exec ? "synth-exec"
                                           : "synth";
  }
  std::vector<RegressionExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t program_seed = derive_seed(seed, i);
    ToyProgram p = gen_program(program_seed, size);
    RegressionExample ex;
    ex.task_id = task_id;
    ex.input_text = p.source;
    if (metrics != MetricSet::exec)
      ex.metrics.push_back({"op_count", static_cast<double>(static_op_count(p.source))});
    if (metrics != MetricSet::cheap) {
      const ExecMetrics m = exec_metrics(p.source, program_seed);
      ex.metrics.push_back({"step_count", static_cast<double>(m.step_count)});
      ex.metrics.push_back({"peak_stack", static_cast<double>(m.peak_stack)});
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace rlm
