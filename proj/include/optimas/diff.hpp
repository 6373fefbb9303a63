#pragma once

// Myers line diff, change regions in original-source coordinates, and
// unified-diff rendering.

#include <algorithm>
#include <string>
#include <string_view>
#include <vector>

#include "optimas/text.hpp"

namespace optimas::diff {

enum class OpKind { equal, del, ins };

struct Op {
    OpKind kind;
    int a = -1; // 0-based index into the original, -1 for insertions
    int b = -1; // 0-based index into the new text, -1 for deletions
};

// Shortest edit script between two line sequences.
inline std::vector<Op> myers(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    const int n = static_cast<int>(a.size());
    const int m = static_cast<int>(b.size());
    const int max = n + m;
    const int off = max + 1;
    std::vector<int> v(2 * max + 3, 0);
    std::vector<std::vector<int>> trace;

    int found_d = 0;
    for (int d = 0; d <= max; ++d) {
        trace.push_back(v);
        bool done = false;
        for (int k = -d; k <= d; k += 2) {
            int x = (k == -d || (k != d && v[off + k - 1] < v[off + k + 1])) ? v[off + k + 1] : v[off + k - 1] + 1;
            int y = x - k;
            while (x < n && y < m && a[x] == b[y]) {
                ++x;
                ++y;
            }
            v[off + k] = x;
            if (x >= n && y >= m) {
                done = true;
                break;
            }
        }
        if (done) {
            found_d = d;
            break;
        }
    }

    std::vector<Op> ops;
    int x = n, y = m;
    for (int d = found_d; d >= 0; --d) {
        const auto& vd = trace[d];
        int k = x - y;
        if (d == 0) {
            while (x > 0 && y > 0) ops.push_back({OpKind::equal, --x, --y});
            break;
        }
        int prev_k = (k == -d || (k != d && vd[off + k - 1] < vd[off + k + 1])) ? k + 1 : k - 1;
        int prev_x = vd[off + prev_k];
        int prev_y = prev_x - prev_k;
        while (x > prev_x && y > prev_y) ops.push_back({OpKind::equal, --x, --y});
        if (x == prev_x) {
            ops.push_back({OpKind::ins, -1, --y});
        } else {
            ops.push_back({OpKind::del, --x, -1});
        }
    }
    std::reverse(ops.begin(), ops.end());
    return ops;
}

// Changes expressed against the original: deleted/replaced lines (1-based)
// and insertion points (insertion after original line p, 0 = before line 1).
struct ChangeSet {
    std::vector<int> deleted_lines;
    std::vector<int> insertion_points;

    // True iff the original range [start, end] covers a deleted line or is
    // adjacent to / contains an insertion point.
    bool touches(int start, int end) const {
        for (int l : deleted_lines) {
            if (l >= start && l <= end) return true;
        }
        for (int p : insertion_points) {
            if (p >= start - 1 && p <= end) return true;
        }
        return false;
    }
    bool empty() const { return deleted_lines.empty() && insertion_points.empty(); }
};

inline ChangeSet change_set(const std::vector<Op>& ops, int last_a = 0) {
    ChangeSet cs;
    // last_a: 1-based number of the last original line consumed
    // a run of non-equal ops containing a deletion is a replacement and is
    // represented by its deleted lines; pure insertion runs keep their point
    bool run_ins = false, run_del = false;
    int run_point = 0;
    auto close_run = [&] {
        if (run_ins && !run_del) cs.insertion_points.push_back(run_point);
        run_ins = run_del = false;
    };
    for (const auto& op : ops) {
        if (op.kind == OpKind::equal) {
            close_run();
            last_a = op.a + 1;
            continue;
        }
        if (!run_ins && !run_del) run_point = last_a;
        if (op.kind == OpKind::ins) {
            run_ins = true;
        } else {
            run_del = true;
            last_a = op.a + 1;
            cs.deleted_lines.push_back(last_a);
        }
    }
    close_run();
    return cs;
}

inline ChangeSet change_set(std::string_view original, std::string_view modified) {
    return change_set(myers(text::split_lines(original), text::split_lines(modified)));
}

struct Hunk {
    int orig_start = 0; // 1-based; unified-diff convention for empty ranges
    int orig_len = 0;
    int new_start = 0;
    int new_len = 0;
    std::vector<std::string> lines; // prefixed with ' ', '-' or '+'
    ChangeSet changes;              // changes inside this hunk only

    std::string header() const {
        return "@@ -" + std::to_string(orig_start) + "," + std::to_string(orig_len) + " +" + std::to_string(new_start) +
               "," + std::to_string(new_len) + " @@";
    }
};

inline std::vector<Hunk> hunks(const std::vector<std::string>& a, const std::vector<std::string>& b, int context = 3) {
    auto ops = myers(a, b);
    std::vector<Hunk> out;
    const int total = static_cast<int>(ops.size());
    int i = 0;
    while (i < total) {
        while (i < total && ops[i].kind == OpKind::equal) ++i;
        if (i >= total) break;
        int begin = std::max(0, i - context);
        // Extend while the gap of equal ops between changes stays within 2*context.
        int end = i;
        while (end < total) {
            if (ops[end].kind != OpKind::equal) {
                ++end;
                continue;
            }
            int run = end;
            while (run < total && ops[run].kind == OpKind::equal) ++run;
            if (run >= total || run - end > 2 * context) {
                end = std::min(total, end + context);
                break;
            }
            end = run;
        }

        Hunk h;
        int a_first = -1, b_first = -1, a_before = 0, b_before = 0;
        for (int j = 0; j < begin; ++j) {
            if (ops[j].kind != OpKind::ins) ++a_before;
            if (ops[j].kind != OpKind::del) ++b_before;
        }
        std::vector<Op> slice(ops.begin() + begin, ops.begin() + end);
        for (const auto& op : slice) {
            switch (op.kind) {
            case OpKind::equal:
                h.lines.push_back(" " + a[op.a]);
                ++h.orig_len;
                ++h.new_len;
                break;
            case OpKind::del:
                h.lines.push_back("-" + a[op.a]);
                ++h.orig_len;
                break;
            case OpKind::ins:
                h.lines.push_back("+" + b[op.b]);
                ++h.new_len;
                break;
            }
            if (a_first < 0 && op.a >= 0) a_first = op.a;
            if (b_first < 0 && op.b >= 0) b_first = op.b;
        }
        h.orig_start = h.orig_len ? a_first + 1 : a_before;
        h.new_start = h.new_len ? b_first + 1 : b_before;

        h.changes = change_set(slice, a_before);
        out.push_back(std::move(h));
        i = end;
    }
    return out;
}

inline std::string unified(const std::vector<Hunk>& hs, const std::string& from = "original.src",
                           const std::string& to = "optimized.src") {
    if (hs.empty()) return {};
    std::string out = "--- " + from + "\n+++ " + to + "\n";
    for (const auto& h : hs) {
        out += h.header() + "\n";
        for (const auto& l : h.lines) out += l + "\n";
    }
    return out;
}

inline std::string unified(std::string_view original, std::string_view modified) {
    return unified(hunks(text::split_lines(original), text::split_lines(modified)));
}

} // namespace optimas::diff
