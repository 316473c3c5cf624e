#pragma once

// Line-oriented text format for joint models.
//
//   joint tabular V L
//   <t_0>,<t_1>,...,<t_{L-1}> <prob>        one line per assignment; absent = 0
//
//   joint dag V L
//   node <pos> parents <p_1> ... <p_k> cpt <V^k * V row-major probabilities>
//
// Tokens are 1..V, positions 0-based. Blank lines and lines starting with
// '#' are ignored. Every row must sum to 1 within 1e-9.

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "dos/oracle.hpp"

namespace dos {

inline constexpr double kJointFileTolerance = 1e-9;

class JointFormatError : public std::runtime_error {
public:
    JointFormatError(std::size_t line, const std::string& what)
        : std::runtime_error("joint file line " + std::to_string(line) + ": " + what) {}
};

inline JointModel parse_joint(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    auto next_line = [&]() -> bool {
        while (std::getline(in, line)) {
            ++lineno;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            return true;
        }
        return false;
    };
    if (!next_line()) throw JointFormatError(lineno, "missing header");
    std::istringstream header(line);
    std::string magic, kind;
    long long V = 0, L = 0;
    if (!(header >> magic >> kind >> V >> L) || magic != "joint") {
        throw JointFormatError(lineno, "expected 'joint <tabular|dag> V L'");
    }
    if (V < 2 || L < 1) throw JointFormatError(lineno, "V must be >= 2 and L >= 1");
    const auto vocab = static_cast<int>(V);
    const auto length = static_cast<std::size_t>(L);

    auto read_token = [&](const std::string& s) {
        std::size_t used = 0;
        int t = 0;
        try {
            t = std::stoi(s, &used);
        } catch (const std::exception&) {
            throw JointFormatError(lineno, "bad token '" + s + "'");
        }
        if (used != s.size() || t < 1 || t > vocab) throw JointFormatError(lineno, "token out of range '" + s + "'");
        return t;
    };

    if (kind == "tabular") {
        const std::size_t n = detail::checked_pow(static_cast<std::size_t>(vocab), length, kDefaultEnumerationLimit);
        std::vector<double> table(n, 0.0);
        std::vector<bool> seen(n, false);
        const auto all = detail::iota_positions(length);
        while (next_line()) {
            std::istringstream row(line);
            std::vector<std::string> fields;
            for (std::string f; row >> f;) fields.push_back(f);
            Tokens x;
            if (fields.size() == 2) {
                std::stringstream ss(fields[0]);
                for (std::string tok; std::getline(ss, tok, ',');) x.push_back(read_token(tok));
            } else if (fields.size() == length + 1) {
                for (std::size_t i = 0; i < length; ++i) x.push_back(read_token(fields[i]));
            } else {
                throw JointFormatError(lineno, "expected '<assignment> <prob>'");
            }
            if (x.size() != length) throw JointFormatError(lineno, "assignment has wrong length");
            double p = 0.0;
            try {
                p = std::stod(fields.back());
            } catch (const std::exception&) {
                throw JointFormatError(lineno, "bad probability '" + fields.back() + "'");
            }
            const std::size_t idx = detail::encode_index(x, vocab, all);
            if (seen[idx]) throw JointFormatError(lineno, "duplicate assignment");
            seen[idx] = true;
            table[idx] = p;
        }
        try {
            return JointModel::tabular(vocab, length, std::move(table), kJointFileTolerance);
        } catch (const std::invalid_argument& e) {
            throw JointFormatError(lineno, e.what());
        }
    }
    if (kind != "dag") throw JointFormatError(lineno, "unknown joint kind '" + kind + "'");

    std::vector<CptNode> nodes;
    while (next_line()) {
        std::istringstream row(line);
        std::string word;
        CptNode node;
        long long pos = -1;
        if (!(row >> word) || word != "node" || !(row >> pos) || pos < 0) {
            throw JointFormatError(lineno, "expected 'node <pos> parents ... cpt ...'");
        }
        node.position = static_cast<std::size_t>(pos);
        if (!(row >> word) || word != "parents") throw JointFormatError(lineno, "expected 'parents'");
        bool saw_cpt = false;
        while (row >> word) {
            if (word == "cpt") {
                saw_cpt = true;
                break;
            }
            if (word == "-") continue;
            try {
                node.parents.push_back(static_cast<std::size_t>(std::stoul(word)));
            } catch (const std::exception&) {
                throw JointFormatError(lineno, "bad parent id '" + word + "'");
            }
        }
        if (!saw_cpt) throw JointFormatError(lineno, "missing 'cpt'");
        for (double p; row >> p;) node.table.push_back(p);
        if (!row.eof()) throw JointFormatError(lineno, "bad CPT probability");
        nodes.push_back(std::move(node));
    }
    try {
        return JointModel::dag(vocab, length, std::move(nodes), kJointFileTolerance);
    } catch (const std::invalid_argument& e) {
        throw JointFormatError(lineno, e.what());
    }
}

inline JointModel load_joint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open joint file " + path);
    return parse_joint(in);
}

inline void write_joint(const JointModel& model, std::ostream& out) {
    out << std::setprecision(17);
    const bool tab = model.kind() == JointModel::Kind::tabular;
    out << "joint " << (tab ? "tabular" : "dag") << ' ' << model.vocab_size() << ' ' << model.length() << '\n';
    if (tab) {
        Tokens x(model.length());
        const auto all = detail::iota_positions(model.length());
        for (std::size_t i = 0; i < model.table().size(); ++i) {
            if (model.table()[i] == 0.0) continue;
            detail::decode_index(i, model.vocab_size(), all, x);
            for (std::size_t k = 0; k < x.size(); ++k) out << (k ? "," : "") << x[k];
            out << ' ' << model.table()[i] << '\n';
        }
        return;
    }
    for (const auto& node : model.nodes()) {
        out << "node " << node.position << " parents";
        for (std::size_t p : node.parents) out << ' ' << p;
        out << " cpt";
        for (double p : node.table) out << ' ' << p;
        out << '\n';
    }
}

inline void save_joint(const JointModel& model, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write joint file " + path);
    write_joint(model, out);
}

}  // namespace dos
