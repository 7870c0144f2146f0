#include "icfd/data.hpp"

#include <fstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace icfd::data {

namespace {

bool is_image_file(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

GrayscaleImage decode_image(const std::filesystem::path& path, int label, int resize_to) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw IoError("load_folder: cannot decode " + path.string());
    if (resize_to > 0 && (bgr.rows != resize_to || bgr.cols != resize_to))
        cv::resize(bgr, bgr, cv::Size(resize_to, resize_to), 0, 0, cv::INTER_AREA);
    cv::Mat f;
    bgr.convertTo(f, CV_32FC3, 1.0 / 255.0);

    const int H = f.rows, W = f.cols;
    Tensor<float> rgb({3, H, W});
    for (int h = 0; h < H; ++h) {
        const cv::Vec3f* row = f.ptr<cv::Vec3f>(h);
        for (int w = 0; w < W; ++w) {
            rgb.at3(0, h, w) = row[w][2];
            rgb.at3(1, h, w) = row[w][1];
            rgb.at3(2, h, w) = row[w][0];
        }
    }
    GrayscaleImage img;
    img.label = label;
    img.pixels = to_luma(rgb);
    return img;
}

} // namespace

Dataset load_folder(const std::filesystem::path& root, int resize_to) {
    if (!std::filesystem::is_directory(root))
        throw ConfigError("load_folder: not a directory: " + root.string());
    std::vector<std::filesystem::path> class_dirs;
    for (const auto& e : std::filesystem::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.size() < 2)
        throw ConfigError("load_folder: need at least 2 class folders under " + root.string());

    Dataset ds;
    ds.num_classes = static_cast<int>(class_dirs.size());
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        std::vector<std::filesystem::path> files;
        for (const auto& e : std::filesystem::directory_iterator(class_dirs[c]))
            if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw ConfigError("load_folder: class folder has no images: " + class_dirs[c].string());
        for (const auto& f : files) ds.items.push_back(decode_image(f, static_cast<int>(c), resize_to));
    }
    return ds;
}

void export_dataset(const Dataset& ds, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::ofstream manifest(out_dir / "manifest.csv");
    if (!manifest) throw IoError("export_dataset: cannot write manifest under " + out_dir.string());
    manifest << "path,label\n";
    std::vector<int> counter(static_cast<std::size_t>(ds.num_classes), 0);
    for (const auto& item : ds.items) {
        char cls[16], name[32];
        std::snprintf(cls, sizeof(cls), "class_%03d", item.label);
        std::snprintf(name, sizeof(name), "img_%05d.png", counter[item.label]++);
        const std::filesystem::path dir = out_dir / cls;
        std::filesystem::create_directories(dir);
        const int H = item.pixels.dim(1), W = item.pixels.dim(2);
        cv::Mat m(H, W, CV_8UC1);
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                m.at<std::uint8_t>(h, w) =
                    static_cast<std::uint8_t>(std::lround(std::clamp(item.pixels.at3(0, h, w), 0.0f, 1.0f) * 255.0f));
        if (!cv::imwrite((dir / name).string(), m))
            throw IoError("export_dataset: cannot write " + (dir / name).string());
        manifest << cls << '/' << name << ',' << item.label << '\n';
    }
}

} // namespace icfd::data
