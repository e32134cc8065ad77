#pragma once

#include <cctype>
#include <cmath>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "cgolab/error.hpp"

namespace cgolab {

/// Closed-form scalar expression in the coordinates x1..xn.
class Expr {
 public:
  enum class Op { Const, Var, Add, Sub, Mul, Div, Neg, Exp, Sin, Cos, Log, Pow };

  Expr() : Expr(constant(0.0)) {}
  static Expr constant(double v) { return Expr(std::make_shared<Node>(Node{Op::Const, v, 0, {}})); }
  static Expr var(int i) { return Expr(std::make_shared<Node>(Node{Op::Var, 0.0, i, {}})); }

  Op op() const { return node_->op; }
  bool is_const() const { return node_->op == Op::Const; }
  bool is_const(double v) const { return is_const() && node_->value == v; }
  double value() const { return node_->value; }
  int var_index() const { return node_->var; }
  const Expr& arg(std::size_t i) const { return node_->args[i]; }

  double operator()(const double* x) const { return eval(*node_, x); }
  double operator()(const std::vector<double>& x) const { return eval(*node_, x.data()); }

  friend Expr operator+(const Expr& a, const Expr& b) {
    if (a.is_const() && b.is_const()) return constant(a.value() + b.value());
    if (a.is_const(0.0)) return b;
    if (b.is_const(0.0)) return a;
    return make(Op::Add, {a, b});
  }
  friend Expr operator-(const Expr& a, const Expr& b) {
    if (a.is_const() && b.is_const()) return constant(a.value() - b.value());
    if (b.is_const(0.0)) return a;
    if (a.is_const(0.0)) return -b;
    return make(Op::Sub, {a, b});
  }
  friend Expr operator*(const Expr& a, const Expr& b) {
    if (a.is_const() && b.is_const()) return constant(a.value() * b.value());
    if (a.is_const(0.0) || b.is_const(0.0)) return constant(0.0);
    if (a.is_const(1.0)) return b;
    if (b.is_const(1.0)) return a;
    return make(Op::Mul, {a, b});
  }
  friend Expr operator/(const Expr& a, const Expr& b) {
    if (a.is_const() && b.is_const()) return constant(a.value() / b.value());
    if (a.is_const(0.0)) return constant(0.0);
    if (b.is_const(1.0)) return a;
    return make(Op::Div, {a, b});
  }
  Expr operator-() const {
    if (is_const()) return constant(-value());
    if (op() == Op::Neg) return arg(0);
    return make(Op::Neg, {*this});
  }
  friend Expr exp(const Expr& a) { return a.is_const() ? constant(std::exp(a.value())) : make(Op::Exp, {a}); }
  friend Expr sin(const Expr& a) { return a.is_const() ? constant(std::sin(a.value())) : make(Op::Sin, {a}); }
  friend Expr cos(const Expr& a) { return a.is_const() ? constant(std::cos(a.value())) : make(Op::Cos, {a}); }
  friend Expr log(const Expr& a) { return a.is_const() ? constant(std::log(a.value())) : make(Op::Log, {a}); }
  friend Expr pow(const Expr& a, const Expr& b) {
    if (a.is_const() && b.is_const()) return constant(std::pow(a.value(), b.value()));
    if (b.is_const(1.0)) return a;
    if (b.is_const(0.0)) return constant(1.0);
    return make(Op::Pow, {a, b});
  }

  Expr diff(int i) const {
    const Node& n = *node_;
    switch (n.op) {
      case Op::Const: return constant(0.0);
      case Op::Var: return constant(n.var == i ? 1.0 : 0.0);
      case Op::Add: return arg(0).diff(i) + arg(1).diff(i);
      case Op::Sub: return arg(0).diff(i) - arg(1).diff(i);
      case Op::Mul: return arg(0).diff(i) * arg(1) + arg(0) * arg(1).diff(i);
      case Op::Div: return (arg(0).diff(i) * arg(1) - arg(0) * arg(1).diff(i)) / (arg(1) * arg(1));
      case Op::Neg: return -arg(0).diff(i);
      case Op::Exp: return *this * arg(0).diff(i);
      case Op::Sin: return cos(arg(0)) * arg(0).diff(i);
      case Op::Cos: return -(sin(arg(0)) * arg(0).diff(i));
      case Op::Log: return arg(0).diff(i) / arg(0);
      case Op::Pow: {
        const Expr& b = arg(0);
        const Expr& e = arg(1);
        Expr db = b.diff(i);
        if (e.is_const()) return constant(e.value()) * pow(b, constant(e.value() - 1.0)) * db;
        return *this * (e.diff(i) * log(b) + e * db / b);
      }
    }
    return constant(0.0);
  }

  bool depends_on(int i) const {
    if (node_->op == Op::Var) return node_->var == i;
    for (const auto& a : node_->args)
      if (a.depends_on(i)) return true;
    return false;
  }

  /// Substitute each variable x_j by the expression sub[j].
  Expr substitute(const std::vector<Expr>& sub) const {
    const Node& n = *node_;
    switch (n.op) {
      case Op::Const: return *this;
      case Op::Var: return sub.at(static_cast<std::size_t>(n.var));
      case Op::Add: return arg(0).substitute(sub) + arg(1).substitute(sub);
      case Op::Sub: return arg(0).substitute(sub) - arg(1).substitute(sub);
      case Op::Mul: return arg(0).substitute(sub) * arg(1).substitute(sub);
      case Op::Div: return arg(0).substitute(sub) / arg(1).substitute(sub);
      case Op::Neg: return -arg(0).substitute(sub);
      case Op::Exp: return exp(arg(0).substitute(sub));
      case Op::Sin: return sin(arg(0).substitute(sub));
      case Op::Cos: return cos(arg(0).substitute(sub));
      case Op::Log: return log(arg(0).substitute(sub));
      case Op::Pow: return pow(arg(0).substitute(sub), arg(1).substitute(sub));
    }
    return *this;
  }

  std::string str() const {
    const Node& n = *node_;
    auto bin = [&](const char* o) { return "(" + arg(0).str() + " " + o + " " + arg(1).str() + ")"; };
    switch (n.op) {
      case Op::Const: {
        std::ostringstream os;
        os.precision(17);
        os << n.value;
        return n.value < 0 ? "(" + os.str() + ")" : os.str();
      }
      case Op::Var: return "x" + std::to_string(n.var + 1);
      case Op::Add: return bin("+");
      case Op::Sub: return bin("-");
      case Op::Mul: return bin("*");
      case Op::Div: return bin("/");
      case Op::Neg: return "(-" + arg(0).str() + ")";
      case Op::Exp: return "exp(" + arg(0).str() + ")";
      case Op::Sin: return "sin(" + arg(0).str() + ")";
      case Op::Cos: return "cos(" + arg(0).str() + ")";
      case Op::Log: return "log(" + arg(0).str() + ")";
      case Op::Pow: return "pow(" + arg(0).str() + ", " + arg(1).str() + ")";
    }
    return "?";
  }

 private:
  struct Node {
    Op op;
    double value;
    int var;
    std::vector<Expr> args;
  };

  explicit Expr(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
  static Expr make(Op op, std::vector<Expr> args) {
    return Expr(std::make_shared<Node>(Node{op, 0.0, 0, std::move(args)}));
  }

  static double eval(const Node& n, const double* x) {
    switch (n.op) {
      case Op::Const: return n.value;
      case Op::Var: return x[n.var];
      case Op::Add: return eval(*n.args[0].node_, x) + eval(*n.args[1].node_, x);
      case Op::Sub: return eval(*n.args[0].node_, x) - eval(*n.args[1].node_, x);
      case Op::Mul: return eval(*n.args[0].node_, x) * eval(*n.args[1].node_, x);
      case Op::Div: return eval(*n.args[0].node_, x) / eval(*n.args[1].node_, x);
      case Op::Neg: return -eval(*n.args[0].node_, x);
      case Op::Exp: return std::exp(eval(*n.args[0].node_, x));
      case Op::Sin: return std::sin(eval(*n.args[0].node_, x));
      case Op::Cos: return std::cos(eval(*n.args[0].node_, x));
      case Op::Log: return std::log(eval(*n.args[0].node_, x));
      case Op::Pow: return std::pow(eval(*n.args[0].node_, x), eval(*n.args[1].node_, x));
    }
    return 0.0;
  }

  std::shared_ptr<const Node> node_;
};

inline Expr operator+(const Expr& a, double b) { return a + Expr::constant(b); }
inline Expr operator+(double a, const Expr& b) { return Expr::constant(a) + b; }
inline Expr operator-(const Expr& a, double b) { return a - Expr::constant(b); }
inline Expr operator-(double a, const Expr& b) { return Expr::constant(a) - b; }
inline Expr operator*(double a, const Expr& b) { return Expr::constant(a) * b; }
inline Expr operator*(const Expr& a, double b) { return a * Expr::constant(b); }
inline Expr operator/(const Expr& a, double b) { return a / Expr::constant(b); }

inline Expr laplacian(const Expr& e, int n) {
  Expr s = Expr::constant(0.0);
  for (int i = 0; i < n; ++i) s = s + e.diff(i).diff(i);
  return s;
}

/// Recursive-descent parser for: numbers, x1..xn, + - * /, unary minus, ^, exp sin cos log sqrt pow.
class ExprParser {
 public:
  ExprParser(std::string text, int n) : s_(std::move(text)), n_(n) {}

  Expr parse() {
    Expr e = expr();
    skip();
    if (pos_ != s_.size()) error("unexpected '" + std::string(1, s_[pos_]) + "'");
    return e;
  }

 private:
  [[noreturn]] void error(const std::string& what) const {
    fail(ErrorKind::ConfigInvalid, "expression '" + s_ + "' at position " + std::to_string(pos_) + ": " + what);
  }
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool eat(char c) {
    skip();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  Expr expr() {
    Expr e = term();
    while (true) {
      if (eat('+')) e = e + term();
      else if (eat('-')) e = e - term();
      else return e;
    }
  }
  Expr term() {
    Expr e = unary();
    while (true) {
      if (eat('*')) e = e * unary();
      else if (eat('/')) e = e / unary();
      else return e;
    }
  }
  Expr unary() {
    if (eat('-')) return -unary();
    if (eat('+')) return unary();
    return power();
  }
  Expr power() {
    Expr b = primary();
    if (eat('^')) return pow(b, unary());
    return b;
  }
  Expr primary() {
    skip();
    if (pos_ >= s_.size()) error("unexpected end of input");
    char c = s_[pos_];
    if (eat('(')) {
      Expr e = expr();
      if (!eat(')')) error("expected ')'");
      return e;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(s_.substr(pos_), &used);
      } catch (const std::exception&) {
        error("malformed number");
      }
      pos_ += used;
      return Expr::constant(v);
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      std::size_t start = pos_;
      while (pos_ < s_.size() && std::isalnum(static_cast<unsigned char>(s_[pos_]))) ++pos_;
      std::string id = s_.substr(start, pos_ - start);
      if (id.size() > 1 && id[0] == 'x' && id.find_first_not_of("0123456789", 1) == std::string::npos) {
        int i = std::stoi(id.substr(1));
        if (i < 1 || i > n_) {
          pos_ = start;
          error("coordinate " + id + " outside x1..x" + std::to_string(n_));
        }
        return Expr::var(i - 1);
      }
      if (id == "pi") return Expr::constant(M_PI);
      if (!eat('(')) {
        pos_ = start;
        error("unknown identifier '" + id + "'");
      }
      Expr a = expr();
      Expr b;
      bool two = false;
      if (eat(',')) {
        b = expr();
        two = true;
      }
      if (!eat(')')) error("expected ')'");
      if (id == "pow" && two) return pow(a, b);
      if (two) error("function '" + id + "' takes one argument");
      if (id == "exp") return exp(a);
      if (id == "sin") return sin(a);
      if (id == "cos") return cos(a);
      if (id == "log") return log(a);
      if (id == "sqrt") return pow(a, Expr::constant(0.5));
      pos_ = start;
      error("unknown function '" + id + "'");
    }
    error("unexpected '" + std::string(1, c) + "'");
  }

  std::string s_;
  int n_;
  std::size_t pos_ = 0;
};

inline Expr parse_expr(const std::string& text, int n) { return ExprParser(text, n).parse(); }

}  // namespace cgolab
