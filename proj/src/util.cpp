#include "hgct/util.hpp"

#include <cstdio>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace hgct {

void log_warn(const std::string& msg) { std::fprintf(stderr, "[warn] %s\n", msg.c_str()); }
void log_info(const std::string& msg) { std::fprintf(stderr, "[info] %s\n", msg.c_str()); }

namespace {
// Activation buffers are tens of MB and are allocated per op; keep them on
// the heap free-list instead of round-tripping pages through mmap/munmap.
struct MallocTuning {
    MallocTuning() {
#ifdef __GLIBC__
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    }
};
const MallocTuning tuning_applied{};
}  // namespace

}  // namespace hgct
