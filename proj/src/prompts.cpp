#include "crisp/prompts.hpp"

#include <cmath>

#include "crisp/errors.hpp"
#include "crisp/rng.hpp"

namespace crisp {

PromptGenerator PromptGenerator::make(std::uint64_t seed, std::size_t dim) {
    if (dim == 0) throw ParamError("prompt generator: dim must be positive");
    PromptGenerator gen;
    gen.seed = seed;
    gen.dim = dim;

    SeededRng rng(derive_seed(seed, "projection"));
    Matrix m(dim, dim);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.gaussian();

    // Modified Gram-Schmidt on rows: full-rank orthonormal projection so the
    // prompt map stays injective in the tokens. A degenerate row (never seen
    // in practice) falls back to a basis vector before re-orthogonalizing.
    for (std::size_t i = 0; i < dim; ++i) {
        for (int attempt = 0; attempt < 2; ++attempt) {
            for (std::size_t p = 0; p < i; ++p) {
                double dot = 0.0;
                for (std::size_t j = 0; j < dim; ++j) dot += m(i, j) * m(p, j);
                for (std::size_t j = 0; j < dim; ++j) m(i, j) -= dot * m(p, j);
            }
            double norm = 0.0;
            for (std::size_t j = 0; j < dim; ++j) norm += m(i, j) * m(i, j);
            norm = std::sqrt(norm);
            if (norm >= 1e-8) {
                for (std::size_t j = 0; j < dim; ++j) m(i, j) /= norm;
                break;
            }
            for (std::size_t j = 0; j < dim; ++j) m(i, j) = (j == i % dim) ? 1.0 : 0.0;
        }
    }
    gen.projection = std::move(m);
    return gen;
}

Matrix PromptGenerator::text_embed(const std::string& name) const {
    SeededRng rng(derive_seed(derive_seed(seed, "text-embed"), hash_tag(name)));
    Matrix v(1, dim);
    double norm = 0.0;
    do {
        for (std::size_t j = 0; j < dim; ++j) v(0, j) = rng.gaussian();
        norm = frobenius_norm(v);
    } while (norm < 1e-8);
    return scale(v, 1.0 / norm);
}

Matrix PromptGenerator::text_embed_rows(const std::vector<std::string>& names) const {
    Matrix rows(names.size(), dim);
    for (std::size_t i = 0; i < names.size(); ++i) {
        Matrix e = text_embed(names[i]);
        for (std::size_t j = 0; j < dim; ++j) rows(i, j) = e(0, j);
    }
    return rows;
}

Matrix generate_prompts(const PromptGenerator& gen,
                        const std::vector<std::string>& names,
                        const Matrix& tokens) {
    if (names.size() != tokens.rows()) {
        throw ShapeError("generate_prompts: " + std::to_string(names.size()) +
                         " names vs " + std::to_string(tokens.rows()) + " token rows");
    }
    if (tokens.cols() != gen.dim) {
        throw ShapeError("generate_prompts: tokens are " + shape_string(tokens) +
                         ", generator dim is " + std::to_string(gen.dim));
    }
    return matmul(add(gen.text_embed_rows(names), tokens), gen.projection);
}

Var generate_prompts(Tape& tape, const PromptGenerator& gen,
                     const std::vector<std::string>& names, Var tokens) {
    const Matrix& tok = tape.value(tokens);
    if (names.size() != tok.rows()) {
        throw ShapeError("generate_prompts: " + std::to_string(names.size()) +
                         " names vs " + std::to_string(tok.rows()) + " token rows");
    }
    if (tok.cols() != gen.dim) {
        throw ShapeError("generate_prompts: tokens are " + shape_string(tok) +
                         ", generator dim is " + std::to_string(gen.dim));
    }
    Var embeds = tape.constant(gen.text_embed_rows(names));
    Var proj = tape.constant(gen.projection);
    return tape.matmul(tape.add(embeds, tokens), proj);
}

namespace {

std::vector<std::size_t> argmax_rows(const Matrix& s) {
    std::vector<std::size_t> out(s.rows(), 0);
    for (std::size_t i = 0; i < s.rows(); ++i) {
        double best = s(i, 0);
        std::size_t arg = 0;
        for (std::size_t j = 1; j < s.cols(); ++j) {
            if (s(i, j) > best) {  // strict: ties keep the lower index
                best = s(i, j);
                arg = j;
            }
        }
        out[i] = arg;
    }
    return out;
}

}  // namespace

MatchResult match_queries(const Matrix& q, const Matrix& p, Similarity sim) {
    if (q.cols() != p.cols()) {
        throw ShapeError("match_queries: queries " + shape_string(q) +
                         " vs prompts " + shape_string(p));
    }
    if (q.rows() == 0 || p.rows() == 0) {
        throw ShapeError("match_queries: empty operand");
    }

    MatchResult out;
    if (sim == Similarity::frobenius) {
        double fq = frobenius_norm(q);
        double fp = frobenius_norm(p);
        if (fq < 1e-12 || fp < 1e-12) {
            throw DegenerateError("match_queries: operand Frobenius norm below 1e-12");
        }
        out.scale_constant = 1.0 / (fq * fp);
        out.similarity = scale(matmul(q, transpose(p)), out.scale_constant);
    } else {
        out.scale_constant = 1.0;
        out.similarity = matmul(row_normalize(q), transpose(row_normalize(p)));
    }
    out.assignments = argmax_rows(out.similarity);
    return out;
}

Var similarity_matrix(Tape& tape, Var q, Var p, Similarity sim) {
    const Matrix& qv = tape.value(q);
    const Matrix& pv = tape.value(p);
    if (qv.cols() != pv.cols()) {
        throw ShapeError("similarity_matrix: queries " + shape_string(qv) +
                         " vs prompts " + shape_string(pv));
    }
    if (sim == Similarity::frobenius) {
        if (frobenius_norm(qv) < 1e-12 || frobenius_norm(pv) < 1e-12) {
            throw DegenerateError("similarity_matrix: operand Frobenius norm below 1e-12");
        }
        Var raw = tape.matmul(q, tape.transpose(p));
        Var norm_product = tape.mul_scalar(tape.frobenius(q), tape.frobenius(p));
        return tape.mul_scalar(raw, tape.reciprocal(norm_product));
    }
    return tape.matmul(tape.row_normalize(q), tape.transpose(tape.row_normalize(p)));
}

Matrix gather_matched_prompts(const MatchResult& match, const Matrix& p) {
    Matrix out(match.assignments.size(), p.cols());
    for (std::size_t i = 0; i < match.assignments.size(); ++i) {
        std::size_t idx = match.assignments[i];
        if (idx >= p.rows()) {
            throw ParamError("gather_matched_prompts: assignment " + std::to_string(idx) +
                             " out of range for " + std::to_string(p.rows()) + " prompts");
        }
        for (std::size_t j = 0; j < p.cols(); ++j) out(i, j) = p(idx, j);
    }
    return out;
}

}  // namespace crisp
