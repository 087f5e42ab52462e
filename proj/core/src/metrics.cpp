#include "fewseg/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace fewseg {

double iou(const Mask& pred, const Mask& gt) {
    if (pred.h != gt.h || pred.w != gt.w) throw std::invalid_argument("iou: mask sizes differ");
    long long inter = 0, uni = 0;
    for (size_t i = 0; i < pred.a.size(); ++i) {
        bool p = pred.a[i] != 0, g = gt.a[i] != 0;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    if (uni == 0) return 1.0;  // both empty: absence correctly predicted
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double miou(const std::vector<ClassResult>& results) {
    if (results.empty()) throw std::invalid_argument("miou: empty result list");
    std::map<int, std::pair<long long, long long>> acc;
    for (const ClassResult& r : results) {
        acc[r.class_id].first += r.intersection;
        acc[r.class_id].second += r.set_union;
    }
    double sum = 0.0;
    for (const auto& [cls, iu] : acc) {
        sum += iu.second == 0 ? 1.0 : static_cast<double>(iu.first) / static_cast<double>(iu.second);
    }
    return sum / static_cast<double>(acc.size());
}

std::string format_metrics_csv(const std::vector<EvalRow>& rows) {
    std::string out = "fold,class_id,n_shot,iou_accumulated,episodes\n";
    char buf[128];
    for (const EvalRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.17g,%lld\n", r.fold, r.class_id, r.n_shot,
                      r.iou_accumulated, r.episodes);
        out += buf;
    }
    return out;
}

void write_metrics_csv(const std::string& path, const std::vector<EvalRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    out << format_metrics_csv(rows);
}

}  // namespace fewseg
