#pragma once

#include <algorithm>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "rlm/errors.hpp"

namespace rlm {

inline constexpr const char* kEosToken = "<eos>";
inline constexpr const char* kUnkToken = "<unk>";

// Bidirectional token <-> id map with the two reserved entries always present.
struct Vocabulary {
    std::unordered_map<std::string, int> token_to_id;
    std::vector<std::string> id_to_token;
    int eos_id = -1;
    int unk_id = -1;

    int size() const { return static_cast<int>(id_to_token.size()); }

    int add(const std::string& token) {
        auto it = token_to_id.find(token);
        if (it != token_to_id.end()) return it->second;
        const int id = size();
        token_to_id.emplace(token, id);
        id_to_token.push_back(token);
        return id;
    }

    // Lookup with the unknown-token fallback.
    int id_of(const std::string& token) const {
        auto it = token_to_id.find(token);
        return it == token_to_id.end() ? unk_id : it->second;
    }

    const std::string& token_of(int id) const {
        if (id < 0 || id >= size())
            throw ValueError("vocabulary: id " + std::to_string(id) + " out of range");
        return id_to_token[static_cast<std::size_t>(id)];
    }
};

// Ids assigned in first-occurrence order after the two reserved tokens, so a
// given training split always produces the same vocabulary.
inline Vocabulary build_vocabulary(std::span<const std::string> train_tokens) {
    if (train_tokens.empty()) throw ValueError("build_vocabulary: empty token sequence");
    Vocabulary v;
    v.eos_id = v.add(kEosToken);
    v.unk_id = v.add(kUnkToken);
    for (const auto& tok : train_tokens) v.add(tok);
    return v;
}

inline std::vector<std::string> split_tokens(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(std::move(tok));
    return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

inline std::vector<std::string> tokens_of_lines(std::span<const std::string> lines) {
    std::vector<std::string> out;
    for (const auto& line : lines)
        for (auto& tok : split_tokens(line)) out.push_back(std::move(tok));
    return out;
}

// Whitespace-split each line, map unknowns to <unk>, close each line with <eos>.
inline std::vector<int> encode(std::span<const std::string> lines, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& line : lines) {
        for (const auto& tok : split_tokens(line)) ids.push_back(vocab.id_of(tok));
        ids.push_back(vocab.eos_id);
    }
    return ids;
}

inline std::vector<std::string> decode(std::span<const int> ids, const Vocabulary& vocab) {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(vocab.token_of(id));
    return out;
}

// Row-major id matrix; rows are timesteps, columns are batch examples.
struct IdMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<int> ids;

    int at(int r, int c) const { return ids[static_cast<std::size_t>(r) * cols + c]; }
};

// The contiguous-batch layout: the token stream is cut into `batch` equal
// streams, one per column; trailing remainder tokens are dropped.
struct BatchedCorpus {
    int n_steps = 0;
    int batch = 0;
    std::vector<int> data;  // row-major [n_steps x batch]

    int at(int t, int b) const { return data[static_cast<std::size_t>(t) * batch + b]; }
};

inline BatchedCorpus batchify(std::span<const int> ids, int batch_size) {
    if (batch_size < 1) throw ValueError("batchify: batch size must be positive");
    if (ids.size() < static_cast<std::size_t>(batch_size))
        throw ValueError("batchify: " + std::to_string(ids.size()) + " tokens < batch size " +
                         std::to_string(batch_size));
    BatchedCorpus out;
    out.batch = batch_size;
    out.n_steps = static_cast<int>(ids.size() / static_cast<std::size_t>(batch_size));
    out.data.resize(static_cast<std::size_t>(out.n_steps) * batch_size);
    for (int b = 0; b < batch_size; ++b)
        for (int t = 0; t < out.n_steps; ++t)
            out.data[static_cast<std::size_t>(t) * batch_size + b] =
                ids[static_cast<std::size_t>(b) * out.n_steps + t];
    return out;
}

struct BpttSlice {
    IdMatrix inputs;   // rows [offset, offset+L)
    IdMatrix targets;  // rows [offset+1, offset+1+L), next-token prediction
};

inline BpttSlice bptt_slice(const BatchedCorpus& corpus, int offset, int bptt) {
    if (bptt < 1) throw ValueError("bptt_slice: bptt must be positive");
    if (offset < 0 || offset >= corpus.n_steps - 1)
        throw ValueError("bptt_slice: offset " + std::to_string(offset) +
                         " out of range for " + std::to_string(corpus.n_steps) + " steps");
    const int L = std::min(bptt, corpus.n_steps - 1 - offset);
    const int B = corpus.batch;
    BpttSlice s;
    s.inputs.rows = s.targets.rows = L;
    s.inputs.cols = s.targets.cols = B;
    const std::size_t n = static_cast<std::size_t>(L) * B;
    s.inputs.ids.assign(corpus.data.begin() + static_cast<std::ptrdiff_t>(offset) * B,
                        corpus.data.begin() + static_cast<std::ptrdiff_t>(offset) * B + n);
    s.targets.ids.assign(corpus.data.begin() + static_cast<std::ptrdiff_t>(offset + 1) * B,
                         corpus.data.begin() + static_cast<std::ptrdiff_t>(offset + 1) * B + n);
    return s;
}

}  // namespace rlm
