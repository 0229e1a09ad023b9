import io
import logging
from pathlib import Path
from typing import Dict, List, Union

from reportlab.lib import colors
from reportlab.lib.enums import TA_CENTER, TA_JUSTIFY
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.lib.units import inch
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle
from xml.sax.saxutils import escape

from .artifacts import atomic_write_bytes
from .report_generator import ReportTable

logger = logging.getLogger(__name__)


class PDFGenerator:
    """Renders a report dict to PDF with byte-reproducible output"""

    def __init__(self, title: str = "Influential Subset Selection Report"):
        self.title = title
        self.styles = getSampleStyleSheet()
        self.create_custom_styles()

    def create_custom_styles(self):
        self.styles.add(ParagraphStyle(
            name='CustomTitle',
            parent=self.styles['Heading1'],
            fontSize=22,
            textColor=colors.HexColor('#1a5276'),
            spaceAfter=20,
            alignment=TA_CENTER,
            leading=26
        ))

        self.styles.add(ParagraphStyle(
            name='SubTitle',
            parent=self.styles['Normal'],
            fontSize=10,
            textColor=colors.HexColor('#34495e'),
            spaceAfter=4,
            alignment=TA_CENTER
        ))

        self.styles.add(ParagraphStyle(
            name='SectionHeading',
            parent=self.styles['Heading2'],
            fontSize=15,
            textColor=colors.HexColor('#2471a3'),
            spaceBefore=18,
            spaceAfter=10,
            leading=19
        ))

        self.styles.add(ParagraphStyle(
            name='CustomBody',
            parent=self.styles['Normal'],
            fontSize=10,
            alignment=TA_JUSTIFY,
            spaceAfter=8,
            leading=13
        ))

        self.styles.add(ParagraphStyle(
            name='BulletItem',
            parent=self.styles['Normal'],
            fontSize=10,
            leftIndent=20,
            spaceAfter=6,
            leading=13
        ))

    def format_table(self, table: ReportTable) -> Table:
        data = [table.header, *table.rows]
        rendered = Table(data, repeatRows=1)
        rendered.setStyle(TableStyle([
            ('FONTSIZE', (0, 0), (-1, -1), 8),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.HexColor('#2471a3')),
            ('LINEBELOW', (0, 0), (-1, 0), 1, colors.HexColor('#2471a3')),
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#f2f4f4')]),
            ('ALIGN', (1, 1), (-1, -1), 'RIGHT'),
        ]))
        return rendered

    def format_content(self, content: Union[str, List, ReportTable]) -> List:
        story = []
        if isinstance(content, ReportTable):
            story.append(self.format_table(content))
        elif isinstance(content, list):
            for item in content:
                story.append(Paragraph(f"• {escape(str(item))}", self.styles['BulletItem']))
        elif content:
            for paragraph in str(content).split('\n\n'):
                if paragraph.strip():
                    story.append(Paragraph(escape(paragraph), self.styles['CustomBody']))
        return story

    def create_title_block(self, report: Dict) -> List:
        story = [Paragraph(escape(self.title), self.styles['CustomTitle'])]
        for key, value in sorted(report.get('metadata', {}).items()):
            story.append(Paragraph(f"{escape(str(key))}: {escape(str(value))}", self.styles['SubTitle']))
        story.append(Spacer(1, 0.25 * inch))
        return story

    def create_pdf(self, report: Dict, output_path: Union[str, Path]) -> Path:
        # invariant mode drops creation dates and random document ids
        buffer = io.BytesIO()
        doc = SimpleDocTemplate(
            buffer,
            pagesize=letter,
            rightMargin=0.75 * inch,
            leftMargin=0.75 * inch,
            topMargin=0.75 * inch,
            bottomMargin=0.75 * inch,
            title=self.title,
            author='iss',
            creator='iss',
            invariant=1,
        )
        story = self.create_title_block(report)
        for section, content in report.items():
            if section == 'metadata':
                continue
            story.append(Paragraph(escape(section), self.styles['SectionHeading']))
            story.extend(self.format_content(content))

        try:
            doc.build(story)
        except Exception as e:
            logger.error("Error creating PDF: %s", e)
            raise
        return atomic_write_bytes(Path(output_path), buffer.getvalue())
