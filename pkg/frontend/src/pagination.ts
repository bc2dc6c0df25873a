export function pageCount(total: number, pageSize: number): number {
  if (pageSize <= 0) throw new Error("pageSize must be positive");
  return Math.max(1, Math.ceil(total / pageSize));
}

export function itemsOnPage(total: number, pageSize: number, page: number): number {
  const pages = pageCount(total, pageSize);
  if (page < 1 || page > pages) return 0;
  if (page < pages) return Math.min(pageSize, total);
  return total - pageSize * (pages - 1);
}

export function clampPage(page: number, total: number, pageSize: number): number {
  return Math.min(Math.max(1, page), pageCount(total, pageSize));
}
