#include "fedattn/schedule.hpp"

#include <algorithm>
#include <numeric>

#include "fedattn/error.hpp"

namespace fedattn {

bool SyncSchedule::is_sync(int block) const {
    return std::binary_search(sync_blocks.begin(), sync_blocks.end(), block);
}

void SyncSchedule::validate() const {
    if (M < 0) throw ScheduleError("SyncSchedule: negative M");
    int prev = 0;
    for (int b : sync_blocks) {
        if (b < 1 || b > M) throw ScheduleError("SyncSchedule: block index out of 1..M");
        if (b <= prev) throw ScheduleError("SyncSchedule: blocks must strictly increase");
        prev = b;
    }
}

const char* schedule_kind_name(ScheduleKind k) {
    switch (k) {
        case ScheduleKind::Uniform: return "uniform";
        case ScheduleKind::ShallowHalf: return "shallow_half";
        case ScheduleKind::DeepHalf: return "deep_half";
        case ScheduleKind::Progressive: return "progressive";
        case ScheduleKind::Regressive: return "regressive";
    }
    throw ConfigError("schedule_kind_name: unknown kind");
}

ScheduleKind schedule_kind_from_name(const std::string& name) {
    if (name == "uniform") return ScheduleKind::Uniform;
    if (name == "shallow_half") return ScheduleKind::ShallowHalf;
    if (name == "deep_half") return ScheduleKind::DeepHalf;
    if (name == "progressive") return ScheduleKind::Progressive;
    if (name == "regressive") return ScheduleKind::Regressive;
    throw ConfigError("unknown schedule kind: " + name);
}

SyncSchedule uniform_schedule(int M, int H) {
    if (M < 1) throw ScheduleError("uniform_schedule: M must be >= 1");
    if (H < 1) throw ScheduleError("uniform_schedule: H must be >= 1");
    if (M % H != 0)
        throw ScheduleError("uniform_schedule: H must divide M (" + std::to_string(H) + " vs " +
                            std::to_string(M) + ")");
    SyncSchedule s;
    s.M = M;
    for (int b = H; b <= M; b += H) s.sync_blocks.push_back(b);
    return s;
}

namespace {

// T picks evenly spread over [lo..hi], always ending at hi.
std::vector<int> even_picks(int lo, int hi, int T) {
    const int len = hi - lo + 1;
    if (T < 1 || T > len) throw ScheduleError("named_schedule: T does not fit the block range");
    std::vector<int> out;
    for (int j = 1; j <= T; ++j)
        out.push_back(lo - 1 + static_cast<int>((static_cast<long>(j) * len + T - 1) / T));
    return out;
}

// Strictly increasing positive gaps summing to M: start from 1..T, stretch by
// the quotient against 1+..+(T-1), then pour the remainder into suffixes.
std::vector<int> progressive_gaps(int M, int T) {
    const long base = static_cast<long>(T) * (T + 1) / 2;
    if (M < base)
        throw ScheduleError("named_schedule: M too small for " + std::to_string(T) +
                            " strictly increasing gaps");
    std::vector<long> gaps(T);
    std::iota(gaps.begin(), gaps.end(), 1L);
    long rem = M - base;
    if (T > 1) {
        const long slope_weight = static_cast<long>(T) * (T - 1) / 2;
        const long slope = rem / slope_weight;
        for (int j = 0; j < T; ++j) gaps[j] += slope * j;
        rem -= slope * slope_weight;
    }
    while (rem > 0) {
        const long s = std::min<long>(rem, T);
        for (long j = T - s; j < T; ++j) ++gaps[j];
        rem -= s;
    }
    return {gaps.begin(), gaps.end()};
}

}  // namespace

SyncSchedule named_schedule(ScheduleKind kind, int M, int T) {
    if (M < 1) throw ScheduleError("named_schedule: M must be >= 1");
    if (T < 1) throw ScheduleError("named_schedule: T must be >= 1");
    SyncSchedule s;
    s.M = M;
    const int half = (M + 1) / 2;
    switch (kind) {
        case ScheduleKind::Uniform:
            if (T > M || M % T != 0)
                throw ScheduleError("named_schedule: uniform needs T dividing M");
            return uniform_schedule(M, M / T);
        case ScheduleKind::ShallowHalf:
            s.sync_blocks = even_picks(1, half, T);
            break;
        case ScheduleKind::DeepHalf:
            s.sync_blocks = even_picks(half + 1, M, T);
            break;
        case ScheduleKind::Progressive: {
            const auto gaps = progressive_gaps(M, T);
            int pos = 0;
            for (int g : gaps) s.sync_blocks.push_back(pos += g);
            break;
        }
        case ScheduleKind::Regressive: {
            auto gaps = progressive_gaps(M, T);
            std::reverse(gaps.begin(), gaps.end());
            int pos = 0;
            for (int g : gaps) s.sync_blocks.push_back(pos += g);
            break;
        }
    }
    s.validate();
    return s;
}

}  // namespace fedattn
