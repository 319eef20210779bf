#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "evocomp/core.hpp"

namespace evocomp::testing {

inline Sample make_sample(const std::string& id, const std::vector<std::vector<double>>& visual,
                          const std::vector<std::vector<double>>& text = {}) {
    Sample s;
    s.id = id;
    s.visual = Matrix::from_rows(visual);
    s.text = text.empty() ? Matrix(0, s.visual.cols) : Matrix::from_rows(text);
    return s;
}

inline Sample random_sample(const std::string& id, std::size_t n, std::size_t m, std::size_t d, Rng& rng,
                            double scale = 1.0) {
    Sample s;
    s.id = id;
    s.visual = Matrix(n, d);
    s.text = Matrix(m, d);
    for (auto& x : s.visual.data) x = scale * standard_normal(rng);
    for (auto& x : s.text.data) x = scale * standard_normal(rng);
    return s;
}

inline GroupPartition make_partition(std::size_t n, const std::vector<std::vector<std::uint32_t>>& groups,
                                     const std::vector<bool>& active = {}) {
    GroupPartition p;
    p.n = n;
    for (std::size_t j = 0; j < groups.size(); ++j)
        p.groups.push_back(Group{static_cast<std::uint32_t>(j), groups[j], active.empty() ? true : active[j]});
    return p;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("evocomp-" + name + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace evocomp::testing
