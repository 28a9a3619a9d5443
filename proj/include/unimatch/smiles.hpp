// SPDX-License-Identifier: Apache-2.0
#pragma once

// SMILES ingestion: tokenizer, graph parser and atom/bond featurizer.
//
// Supported: organic-subset and bracket atoms, bond orders, ring closures
// (digits and %nn), branches, charges and explicit H counts in brackets.
// Stereo marks and isotopes are accepted and dropped. Lowercase atoms are
// flagged aromatic and an implicit bond between two aromatic atoms is typed
// aromatic; there is no kekulization or valence model. Multi-fragment input
// ('.') is rejected.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "unimatch/autodiff.hpp"
#include "unimatch/errors.hpp"

namespace unimatch::smiles {

enum class BondOrder { kSingle = 0, kDouble = 1, kTriple = 2, kAromatic = 3 };

enum class TokenKind { kAtom, kBracketAtom, kBond, kRingClosure, kBranchOpen, kBranchClose, kDot };

struct AtomSpec {
  std::string element;  // capitalized symbol, e.g. "C", "Cl", "Se"
  bool aromatic = false;
  int charge = 0;
  int hydrogens = 0;  // explicit count from a bracket atom
};

struct Token {
  TokenKind kind;
  std::size_t offset = 0;
  std::size_t length = 1;
  AtomSpec atom;                       // kAtom / kBracketAtom
  BondOrder bond = BondOrder::kSingle;  // kBond
  int ring_label = -1;                 // kRingClosure
};

namespace detail {

inline const std::set<std::string, std::less<>>& element_symbols() {
  static const std::set<std::string, std::less<>> symbols = {
      "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",  "S",  "Cl", "Ar", "K",
      "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr",
      "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La",
      "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re", "Os",
      "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am",
      "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl",
      "Mc", "Lv", "Ts", "Og"};
  return symbols;
}

inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Parses the inside of a bracket atom; `pos` points just after '['.
inline AtomSpec parse_bracket(std::string_view s, std::size_t& pos, std::size_t open) {
  auto at_end = [&] { return pos >= s.size(); };
  auto fail = [&](const std::string& what) -> ParseError { return ParseError(what, std::min(pos, s.size())); };

  while (!at_end() && is_digit(s[pos])) ++pos;  // isotope, ignored
  if (at_end()) throw ParseError("unterminated bracket atom", open);

  AtomSpec atom;
  const char c0 = s[pos];
  if (c0 >= 'a' && c0 <= 'z') {
    // aromatic bracket symbols: b c n o p s se as te
    std::string_view rest = s.substr(pos);
    if (rest.starts_with("se") || rest.starts_with("as") || rest.starts_with("te")) {
      atom.element = {static_cast<char>(std::toupper(rest[0])), rest[1]};
      pos += 2;
    } else if (c0 == 'b' || c0 == 'c' || c0 == 'n' || c0 == 'o' || c0 == 'p' || c0 == 's') {
      atom.element = std::string(1, static_cast<char>(std::toupper(c0)));
      pos += 1;
    } else {
      throw fail(std::string("unknown aromatic symbol '") + c0 + "'");
    }
    atom.aromatic = true;
  } else if (c0 >= 'A' && c0 <= 'Z') {
    std::string two;
    if (pos + 1 < s.size() && s[pos + 1] >= 'a' && s[pos + 1] <= 'z') two = std::string(s.substr(pos, 2));
    if (!two.empty() && element_symbols().count(two)) {
      atom.element = two;
      pos += 2;
    } else if (element_symbols().count(std::string(1, c0))) {
      atom.element = std::string(1, c0);
      pos += 1;
    } else {
      throw fail("unknown element symbol in bracket atom");
    }
  } else {
    throw fail("expected element symbol in bracket atom");
  }

  // chirality, ignored: @, @@, @TH1, @AL2, @SP3, @TB12, @OH25
  if (!at_end() && s[pos] == '@') {
    ++pos;
    if (!at_end() && s[pos] == '@') {
      ++pos;
    } else if (pos + 1 < s.size() && std::isupper(static_cast<unsigned char>(s[pos])) &&
               std::isupper(static_cast<unsigned char>(s[pos + 1]))) {
      pos += 2;
      if (at_end() || !is_digit(s[pos])) throw fail("malformed chirality class");
      while (!at_end() && is_digit(s[pos])) ++pos;
    }
  }

  if (!at_end() && s[pos] == 'H') {
    ++pos;
    atom.hydrogens = 1;
    if (!at_end() && is_digit(s[pos])) atom.hydrogens = s[pos++] - '0';
  }

  if (!at_end() && (s[pos] == '+' || s[pos] == '-')) {
    const char sign = s[pos++];
    int magnitude = 1;
    if (!at_end() && is_digit(s[pos])) {
      magnitude = 0;
      while (!at_end() && is_digit(s[pos]) && magnitude < 100) magnitude = magnitude * 10 + (s[pos++] - '0');
    } else {
      while (!at_end() && s[pos] == sign) {
        ++magnitude;
        ++pos;
      }
    }
    atom.charge = sign == '+' ? magnitude : -magnitude;
  }

  if (!at_end() && s[pos] == ':') {
    ++pos;
    if (at_end() || !is_digit(s[pos])) throw fail("malformed atom class");
    while (!at_end() && is_digit(s[pos])) ++pos;
  }

  if (at_end()) throw ParseError("unterminated bracket atom", open);
  if (s[pos] != ']') throw fail(std::string("unexpected character '") + s[pos] + "' in bracket atom");
  ++pos;
  return atom;
}

}  // namespace detail

/// Splits a SMILES string into tokens. Structural errors (unbalanced
/// branches, open rings) are left to parse().
inline std::vector<Token> tokenize(std::string_view s) {
  if (s.empty()) throw ParseError("empty SMILES string", 0);
  std::vector<Token> tokens;
  std::size_t pos = 0;
  while (pos < s.size()) {
    const std::size_t start = pos;
    const char c = s[pos];
    if (static_cast<unsigned char>(c) >= 0x80) throw ParseError("non-ASCII byte", pos);
    Token tok{};
    tok.offset = start;
    switch (c) {
      case 'B':
      case 'C':
        tok.kind = TokenKind::kAtom;
        if (pos + 1 < s.size() && ((c == 'B' && s[pos + 1] == 'r') || (c == 'C' && s[pos + 1] == 'l'))) {
          tok.atom.element = std::string(s.substr(pos, 2));
          pos += 2;
        } else {
          tok.atom.element = std::string(1, c);
          pos += 1;
        }
        break;
      case 'N':
      case 'O':
      case 'P':
      case 'S':
      case 'F':
      case 'I':
        tok.kind = TokenKind::kAtom;
        tok.atom.element = std::string(1, c);
        ++pos;
        break;
      case 'b':
      case 'c':
      case 'n':
      case 'o':
      case 'p':
      case 's':
        tok.kind = TokenKind::kAtom;
        tok.atom.element = std::string(1, static_cast<char>(std::toupper(c)));
        tok.atom.aromatic = true;
        ++pos;
        break;
      case '[':
        ++pos;
        tok.kind = TokenKind::kBracketAtom;
        tok.atom = detail::parse_bracket(s, pos, start);
        break;
      case '-':
      case '/':
      case '\\':
        tok.kind = TokenKind::kBond;
        tok.bond = BondOrder::kSingle;
        ++pos;
        break;
      case '=':
        tok.kind = TokenKind::kBond;
        tok.bond = BondOrder::kDouble;
        ++pos;
        break;
      case '#':
        tok.kind = TokenKind::kBond;
        tok.bond = BondOrder::kTriple;
        ++pos;
        break;
      case ':':
        tok.kind = TokenKind::kBond;
        tok.bond = BondOrder::kAromatic;
        ++pos;
        break;
      case '(':
        tok.kind = TokenKind::kBranchOpen;
        ++pos;
        break;
      case ')':
        tok.kind = TokenKind::kBranchClose;
        ++pos;
        break;
      case '.':
        tok.kind = TokenKind::kDot;
        ++pos;
        break;
      case '%':
        if (pos + 2 >= s.size() || !detail::is_digit(s[pos + 1]) || !detail::is_digit(s[pos + 2]))
          throw ParseError("'%' must be followed by two digits", pos);
        tok.kind = TokenKind::kRingClosure;
        tok.ring_label = (s[pos + 1] - '0') * 10 + (s[pos + 2] - '0');
        pos += 3;
        break;
      default:
        if (detail::is_digit(c)) {
          tok.kind = TokenKind::kRingClosure;
          tok.ring_label = c - '0';
          ++pos;
          break;
        }
        throw ParseError(std::string("unexpected character '") + c + "'", pos);
    }
    tok.length = pos - start;
    tokens.push_back(std::move(tok));
  }
  return tokens;
}

struct ParsedBond {
  std::size_t u = 0;
  std::size_t v = 0;  // u < v
  BondOrder order = BondOrder::kSingle;
};

/// Graph with per-atom annotations, before featurization.
struct ParsedMolecule {
  std::vector<AtomSpec> atoms;
  std::vector<ParsedBond> bonds;
  std::string smiles;
};

/// Builds the molecular graph from a token stream. `source` is recorded on the result.
inline ParsedMolecule parse(const std::vector<Token>& tokens, std::string_view source = {}) {
  ParsedMolecule mol;
  mol.smiles = std::string(source);

  struct RingOpen {
    std::size_t atom;
    std::optional<BondOrder> bond;
    std::size_t offset;
  };
  std::map<int, RingOpen> open_rings;
  std::vector<std::pair<std::size_t, std::size_t>> branch_stack;  // (atom, offset of '(')
  std::optional<std::size_t> prev;
  std::optional<BondOrder> pending;
  std::size_t pending_offset = 0;
  std::set<std::pair<std::size_t, std::size_t>> bonded;
  bool last_was_open_branch = false;

  auto implicit_order = [&](std::size_t a, std::size_t b) {
    return mol.atoms[a].aromatic && mol.atoms[b].aromatic ? BondOrder::kAromatic : BondOrder::kSingle;
  };
  auto add_bond = [&](std::size_t a, std::size_t b, BondOrder order, std::size_t offset) {
    if (a == b) throw ParseError("ring closure bonds an atom to itself", offset);
    auto key = std::minmax(a, b);
    if (!bonded.insert(key).second) throw ParseError("duplicate bond between the same atoms", offset);
    mol.bonds.push_back({key.first, key.second, order});
  };

  for (const Token& tok : tokens) {
    switch (tok.kind) {
      case TokenKind::kAtom:
      case TokenKind::kBracketAtom: {
        const std::size_t idx = mol.atoms.size();
        mol.atoms.push_back(tok.atom);
        if (prev) add_bond(*prev, idx, pending.value_or(implicit_order(*prev, idx)), tok.offset);
        pending.reset();
        prev = idx;
        last_was_open_branch = false;
        break;
      }
      case TokenKind::kBond:
        if (!prev) throw ParseError("bond symbol without a preceding atom", tok.offset);
        if (pending) throw ParseError("two consecutive bond symbols", tok.offset);
        pending = tok.bond;
        pending_offset = tok.offset;
        break;
      case TokenKind::kRingClosure: {
        if (!prev) throw ParseError("ring closure without a preceding atom", tok.offset);
        if (last_was_open_branch) throw ParseError("ring closure directly after '('", tok.offset);
        auto it = open_rings.find(tok.ring_label);
        if (it == open_rings.end()) {
          open_rings.emplace(tok.ring_label, RingOpen{*prev, pending, tok.offset});
        } else {
          const RingOpen ring = it->second;
          open_rings.erase(it);
          if (ring.bond && pending && *ring.bond != *pending)
            throw ParseError("conflicting bond orders on ring closure " + std::to_string(tok.ring_label), tok.offset);
          const BondOrder order = pending ? *pending : ring.bond ? *ring.bond : implicit_order(ring.atom, *prev);
          add_bond(ring.atom, *prev, order, tok.offset);
        }
        pending.reset();
        break;
      }
      case TokenKind::kBranchOpen:
        if (!prev) throw ParseError("branch without a preceding atom", tok.offset);
        if (pending) throw ParseError("bond symbol before '('", pending_offset);
        branch_stack.emplace_back(*prev, tok.offset);
        last_was_open_branch = true;
        break;
      case TokenKind::kBranchClose:
        if (branch_stack.empty()) throw ParseError("unbalanced ')'", tok.offset);
        if (last_was_open_branch) throw ParseError("empty branch", tok.offset);
        if (pending) throw ParseError("dangling bond symbol before ')'", pending_offset);
        prev = branch_stack.back().first;
        branch_stack.pop_back();
        break;
      case TokenKind::kDot:
        throw ParseError("multi-fragment SMILES ('.') is not supported", tok.offset);
    }
  }

  if (mol.atoms.empty()) throw ParseError("no atoms", 0);
  if (pending) throw ParseError("dangling bond symbol at end of input", pending_offset);
  if (!branch_stack.empty()) throw ParseError("unbalanced '(' never closed", branch_stack.back().second);
  if (!open_rings.empty()) {
    const auto& [label, ring] = *open_rings.begin();
    throw ParseError("ring label " + std::to_string(label) + " unclosed", ring.offset);
  }
  return mol;
}

inline ParsedMolecule parse(std::string_view smiles) { return parse(tokenize(smiles), smiles); }

/// One-hot atom layout: element | degree | formal charge | aromatic flag | explicit H.
struct AtomFeatureSchema {
  std::vector<std::string> elements{"C", "N", "O", "S", "F", "Cl", "Br", "I", "P", "B", "Si"};  // + "other"
  int max_degree = 6;
  int min_charge = -2;
  int max_charge = 2;
  int max_hydrogens = 4;

  std::size_t element_width() const { return elements.size() + 1; }
  std::size_t degree_width() const { return static_cast<std::size_t>(max_degree) + 1; }
  std::size_t charge_width() const { return static_cast<std::size_t>(max_charge - min_charge) + 1; }
  std::size_t hydrogen_width() const { return static_cast<std::size_t>(max_hydrogens) + 1; }
  std::size_t width() const { return element_width() + degree_width() + charge_width() + 1 + hydrogen_width(); }
};

inline constexpr std::size_t kBondFeatureWidth = 4;

/// Dense row-major feature block; may have zero rows (a molecule without bonds).
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  bool operator==(const FeatureMatrix&) const = default;
};

struct MolGraph {
  FeatureMatrix atom_feats;
  std::vector<std::pair<std::size_t, std::size_t>> bonds;  // u < v
  FeatureMatrix bond_feats;
  std::string source_smiles;

  std::size_t num_atoms() const { return atom_feats.rows; }
  std::size_t num_bonds() const { return bonds.size(); }
  ad::Tensor atom_tensor() const { return ad::Tensor::matrix(atom_feats.rows, atom_feats.cols, atom_feats.data); }
};

inline MolGraph featurize(const ParsedMolecule& mol, const AtomFeatureSchema& schema = {}) {
  const std::size_t n = mol.atoms.size();
  std::vector<int> degree(n, 0);
  for (const ParsedBond& b : mol.bonds) {
    ++degree[b.u];
    ++degree[b.v];
  }

  MolGraph g;
  g.source_smiles = mol.smiles;
  g.atom_feats.rows = n;
  g.atom_feats.cols = schema.width();
  g.atom_feats.data.assign(n * schema.width(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const AtomSpec& a = mol.atoms[i];
    double* row = g.atom_feats.data.data() + i * schema.width();
    std::size_t off = 0;
    auto el = std::find(schema.elements.begin(), schema.elements.end(), a.element);
    row[off + static_cast<std::size_t>(el - schema.elements.begin())] = 1.0;
    off += schema.element_width();
    row[off + static_cast<std::size_t>(std::clamp(degree[i], 0, schema.max_degree))] = 1.0;
    off += schema.degree_width();
    row[off + static_cast<std::size_t>(std::clamp(a.charge, schema.min_charge, schema.max_charge) - schema.min_charge)] =
        1.0;
    off += schema.charge_width();
    row[off] = a.aromatic ? 1.0 : 0.0;
    off += 1;
    row[off + static_cast<std::size_t>(std::clamp(a.hydrogens, 0, schema.max_hydrogens))] = 1.0;
  }

  g.bond_feats.rows = mol.bonds.size();
  g.bond_feats.cols = kBondFeatureWidth;
  g.bond_feats.data.assign(mol.bonds.size() * kBondFeatureWidth, 0.0);
  for (std::size_t k = 0; k < mol.bonds.size(); ++k) {
    g.bonds.emplace_back(mol.bonds[k].u, mol.bonds[k].v);
    g.bond_feats.data[k * kBondFeatureWidth + static_cast<std::size_t>(mol.bonds[k].order)] = 1.0;
  }
  return g;
}

/// tokenize + parse + featurize.
inline MolGraph mol_from_smiles(std::string_view smiles, const AtomFeatureSchema& schema = {}) {
  return featurize(parse(smiles), schema);
}

/// Throws ValidationError when a graph breaks a MolGraph invariant.
inline void check_invariants(const MolGraph& g) {
  if (g.num_atoms() < 1) throw ValidationError("molecule has no atoms");
  if (g.atom_feats.data.size() != g.atom_feats.rows * g.atom_feats.cols)
    throw ValidationError("atom feature block size mismatch");
  if (g.bond_feats.rows != g.bonds.size() || g.bond_feats.cols != kBondFeatureWidth)
    throw ValidationError("bond feature block shape mismatch");
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (auto [u, v] : g.bonds) {
    if (u >= v) throw ValidationError("bond endpoints must satisfy u < v");
    if (v >= g.num_atoms()) throw ValidationError("bond endpoint out of range");
    if (!seen.insert({u, v}).second) throw ValidationError("duplicate bond");
  }
}

}  // namespace unimatch::smiles
