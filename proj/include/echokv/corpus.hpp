#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "echokv/error.hpp"

namespace echokv {

// byte-level token ids (vocab 256); no tokenizer dependency
inline std::vector<int> tokenize(const std::string& s) {
    std::vector<int> ids;
    ids.reserve(s.size());
    for (unsigned char c : s) ids.push_back(static_cast<int>(c));
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string s;
    s.reserve(ids.size());
    for (int id : ids) s.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    return s;
}

// Newline-delimited UTF-8 documents → byte-id sequences. Empty lines are
// skipped; sequences are truncated to max_len tokens when max_len > 0.
inline std::vector<std::vector<int>> load_corpus(const std::string& path, size_t max_len = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + path);
    std::vector<std::vector<int>> docs;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto ids = tokenize(line);
        if (max_len > 0 && ids.size() > max_len) ids.resize(max_len);
        docs.push_back(std::move(ids));
    }
    if (in.bad()) throw IoError("read failure on corpus file: " + path);
    if (docs.empty()) throw InputError("corpus is empty: " + path);
    return docs;
}

} // namespace echokv
