#include "memaudit/toy_lm.hpp"

#include <cstdio>
#include <fstream>

namespace memaudit {

void save_entropy_profile_csv(const EntropyProfile& profile, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_entropy_profile_csv: cannot open " + path);
    }
    out << "position,entropy_bits\n";
    char buf[64];
    for (std::size_t i = 0; i < profile.entropies.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%lld,%.12g\n",
                      static_cast<long long>(profile.positions[i]),
                      profile.entropies[i]);
        out << buf;
    }
}

}  // namespace memaudit
